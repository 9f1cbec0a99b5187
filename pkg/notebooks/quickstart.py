"""Quickstart: synthetic benchmark, one multi-task model, one baseline.

Run with ``python3 notebooks/quickstart.py [epochs]``.  The default of 20
epochs takes about a minute on one core; 60 epochs gets the multi-task model
to roughly 2-3 days of held-out onset RMSE.
"""
import sys
import time

from dmcmtl import (TrainConfig, cross_region_eval, evaluate, generate_synthetic, generate_weather,
                    make_split, mean_rmse, train)
from dmcmtl.evaluation import cultivar_rmse

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20

# %% Weather for a training region and a second region used only for transfer.
weather = {"WA": generate_weather("WA", 1990, 2020, seed=1),
           "CA": generate_weather("CA", 1990, 2020, seed=2)}

# %% Five cultivars with hidden GDD parameters; onsets come from the process model.
synthetic = generate_synthetic("gdd", weather, 5, seasons_per_cultivar=12, seed=3, train_region="WA")
dataset = synthetic.to_dataset(weather)
split = make_split(dataset, seed=0)
print("records per region:", {r: len(dataset.select(r)) for r in dataset.regions})

# %% Stationary per-cultivar fit: the process model alone, no network.
stationary = train("stationary_gd", dataset, split, TrainConfig(lr=0.05, epochs=300))
print(f"stationary_gd  held-out RMSE {mean_rmse(evaluate(stationary, split.test_records(dataset))):.2f} d")

# %% The multi-task model against the cultivar-agnostic variant.
for variant in ("dmc_mtl", "dmc_agg"):
    t0 = time.perf_counter()
    result = train(variant, dataset, split, TrainConfig(epochs=epochs, lr=5e-4, seed=0))
    evals = evaluate(result, split.test_records(dataset))
    per = {c: round(v, 2) for c, v in cultivar_rmse(evals).items()}
    print(f"{variant:<8} held-out RMSE {mean_rmse(evals):.2f} d  per cultivar {per}  "
          f"({time.perf_counter() - t0:.0f}s)")
    print("         by region", {r: round(v, 2) for r, v in cross_region_eval(result, dataset, split).items()})
