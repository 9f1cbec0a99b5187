"""Recurrent calibration of differentiable crop models.

A GRU reads daily weather plus a learned cultivar embedding and emits, for
every day, the parameters of a process model (growing-degree-day phenology or
Ferguson cold hardiness).  The process model is unrolled inside the graph so
the whole chain trains end to end on sparse field observations.
"""
from .data import generate_synthetic, generate_weather, load_dataset, make_split
from .evaluation import cross_region_eval, evaluate, mean_rmse
from .training import TrainConfig, load_result, predict_season, save_result, train

__version__ = "0.1.0"

__all__ = [
    "TrainConfig", "cross_region_eval", "evaluate", "generate_synthetic", "generate_weather",
    "load_dataset", "load_result", "make_split", "mean_rmse", "predict_season", "save_result",
    "train",
]
