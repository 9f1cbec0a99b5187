"""Losses, optimizer, plateau scheduler and the training loop for every variant."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import biophysical as bp
from .autodiff import Tensor
from .data.dataset import KINDS, Dataset, DatasetSplit, SeasonRecord, fit_normalizer
from .data.pipeline import Normalizer
from .network import BackboneConfig, NetworkWeights, forward_season, init_weights

log = logging.getLogger(__name__)

VARIANTS = ("dmc_mtl", "dmc_stl", "dmc_agg", "regression_mtl", "classification_mtl",
            "pinn_mtl", "stationary_gd")


class TrainingDiverged(FloatingPointError):
    """Non-finite loss, activation or gradient; ``history`` covers the finished epochs."""

    def __init__(self, epoch: int, detail: str, history: "TrainHistory | None" = None):
        super().__init__(f"epoch {epoch}: {detail}")
        self.epoch = epoch
        self.history = history


# ---------------------------------------------------------------- losses

def _check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("loss mask selects no days")
    return mask


def masked_mse(pred, target, mask) -> Tensor:
    """Mean squared error over the days where ``mask`` is true."""
    mask = _check_mask(mask)
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.value.shape != target.shape or target.shape != mask.shape:
        raise ValueError("pred, target and mask lengths differ")
    sq = ad.square(ad.sub(pred, np.where(mask, target, 0.0)))
    return ad.mul(ad.sum(ad.where_select(mask, sq, 0.0)), 1.0 / mask.sum())


def cross_entropy(logits, labels, mask) -> Tensor:
    """Mean negative log-likelihood of ``labels`` over masked days."""
    mask = _check_mask(mask)
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels).astype(np.int64)
    n_classes = logits.value.shape[-1]
    if np.any((labels[mask] < 0) | (labels[mask] >= n_classes)):
        raise ValueError("class label out of range")
    days = np.flatnonzero(mask)
    logp = ad.log_softmax(logits)
    picked = ad.getitem(logp, (days, labels[days]))
    return ad.mul(ad.sum(picked), -1.0 / days.size)


# label value of each chain stage; the emerged stage is not observed
STAGE_LABEL = np.array([0.0, 0.0, 2.0, 3.0, 4.0, 4.0])
_STEP_UP = np.append(np.diff(STAGE_LABEL), 0.0)
_STEP_DOWN = np.insert(np.diff(STAGE_LABEL), 0, 0.0)
READOUT_SHARPNESS = 20.0


def phenology_readout(y, sharpness: float = READOUT_SHARPNESS) -> Tensor:
    """Map the development value onto the label scale for the loss.

    Within a stage the output sits at the stage's label and moves halfway to
    the neighbouring label along a logistic ramp at either end, so it is
    continuous across transitions and centred on them.  Comparing the raw
    development value with carried-forward labels instead rewards late
    transitions, because fractional progress always overshoots the label.
    """
    y = ad.as_tensor(y)
    stage = np.clip(np.floor(y.value).astype(np.int64), 0, bp.RIPE)
    frac = ad.sub(y, stage.astype(np.float64))
    up = ad.mul(ad.sigmoid(ad.mul(ad.sub(frac, 1.0), sharpness)), _STEP_UP[stage])
    down = ad.mul(ad.sub(1.0, ad.sigmoid(ad.mul(frac, sharpness))), _STEP_DOWN[stage])
    return ad.add(ad.sub(up, down), STAGE_LABEL[stage])


def pinn_loss(pred, target, physics, p: float, mask) -> Tensor:
    """``(1-p)`` x MSE to observations plus ``p`` x MSE to the physics model output."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("pinn weight p must lie in [0, 1]")
    data = masked_mse(pred, target, mask)
    phys = masked_mse(pred, physics, mask)
    return ad.add(ad.mul(data, 1.0 - p), ad.mul(phys, p))


# ---------------------------------------------------------------- optimizer

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, weights) -> "OptimizerState":
        weights = [np.asarray(w) for w in weights]
        return cls([np.zeros_like(w) for w in weights], [np.zeros_like(w) for w in weights])


def adam_step(weights: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
              lr: float) -> None:
    """One bias-corrected Adam update, applied to ``weights`` and ``state`` in place."""
    if not len(weights) == len(grads) == len(state.m) == len(state.v):
        raise ValueError("weights, gradients and optimizer state differ in length")
    for i, (w, g) in enumerate(zip(weights, grads)):
        if w.shape != g.shape:
            raise ValueError(f"weight {i}: shape {w.shape} but gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in weight {i} at step {state.step + 1}")
    b1, b2 = ADAM_BETAS
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for w, g, m, v in zip(weights, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 2e-4):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.state = OptimizerState.zeros_like(p.value for p in self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step([p.value for p in self.params], [p.grad for p in self.params], self.state, self.lr)


class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without improvement.

    Improvement means beating the best loss by a relative ``threshold``.
    """

    def __init__(self, lr: float, factor: float = 0.95, patience: int = 10, threshold: float = 1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if not np.isfinite(self.best) or loss < self.best - abs(self.best) * self.threshold:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def lr_plateau(losses, lr: float = 2e-4, factor: float = 0.95, patience: int = 10) -> float:
    """Learning rate after feeding a whole loss history through the scheduler."""
    sched = PlateauScheduler(lr, factor, patience)
    for loss in losses:
        sched.step(loss)
    return sched.lr


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    variant: str = "dmc_mtl"
    epochs: int = 400
    lr: float = 2e-4
    plateau_factor: float = 0.95
    plateau_patience: int = 10
    pinn_p: float = 0.5
    seed: int = 0
    scale: str = "desk"
    stationary_steps: int | None = None

    @property
    def loss_kind(self) -> str:
        return {"classification_mtl": "cross_entropy", "pinn_mtl": "pinn"}.get(self.variant, "mse")

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.pinn_p <= 1.0:
            raise ValueError("pinn_p must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def record(self, loss: float, lr: float, seconds: float) -> None:
        self.loss.append(loss)
        self.lr.append(lr)
        self.wall_time.append(seconds)

    def __len__(self) -> int:
        return len(self.loss)


# ---------------------------------------------------------------- variant plumbing

def n_classes(kind: str) -> int:
    return bp.N_STAGES


def head_for(variant: str) -> str:
    if variant.startswith("dmc"):
        return "dmc"
    if variant == "classification_mtl":
        return "classification"
    return "regression"


def output_dim(variant: str, model: str) -> int:
    head = head_for(variant)
    if head == "dmc":
        return bp.SPACES[model].k
    if head == "classification":
        return bp.N_STAGES
    return 1


def build_config(variant: str, dataset: Dataset, normalizer: Normalizer, scale: str) -> BackboneConfig:
    multitask = variant.endswith("_mtl")
    return BackboneConfig.build(head_for(variant), normalizer.input_dim,
                                output_dim(variant, dataset.model),
                                n_cultivars=len(dataset.cultivars) if multitask else 0,
                                scale=scale)


def network_output(weights: NetworkWeights, record: SeasonRecord, normalizer: Normalizer,
                   model: str):
    """Head output for one season; for DMC heads also the biophysical rollout."""
    X = normalizer.features(record.weather)
    cid = record.cultivar_id if weights.config.multitask else 0
    out = forward_season(X, cid, weights)
    if weights.config.head == "dmc":
        params = bp.rescale_params(out, bp.SPACES[model])
        return bp.run_season(model, params, record.temperature)
    if weights.config.head == "regression":
        return ad.reshape(out, (record.n_days,))
    return out


def season_loss(variant: str, output, record: SeasonRecord, physics=None, pinn_p: float = 0.5) -> Tensor:
    if variant == "classification_mtl":
        return cross_entropy(output, record.labels, record.mask)
    if variant == "pinn_mtl":
        return pinn_loss(output, record.labels, physics, pinn_p, record.mask)
    if isinstance(output, bp.CropPrediction):
        return state_loss(output, record)
    return masked_mse(output, record.labels, record.mask)


def state_loss(prediction: bp.CropPrediction, record: SeasonRecord) -> Tensor:
    """Loss of a biophysical rollout against a season's labels."""
    pred = prediction.state
    if record.kind == "phenology":
        pred = phenology_readout(pred)
    return masked_mse(pred, record.labels, record.mask)


# ---------------------------------------------------------------- results

@dataclass
class StationaryParams:
    """Per-cultivar stationary parameters in physical units."""
    model: str
    params: dict[str, np.ndarray]


@dataclass
class TrainResult:
    variant: str
    config: TrainConfig
    normalizer: Normalizer
    history: TrainHistory
    weights: NetworkWeights | None = None
    per_cultivar: dict[str, NetworkWeights] | None = None
    stationary: StationaryParams | None = None
    physics_source: StationaryParams | None = None


def _train_network(weights: NetworkWeights, records: list[SeasonRecord], normalizer: Normalizer,
                   model: str, config: TrainConfig, physics: dict | None = None,
                   on_epoch=None) -> TrainHistory:
    rng = np.random.default_rng(config.seed)
    opt = Adam(list(weights), lr=config.lr)
    sched = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience)
    history = TrainHistory()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        total = 0.0
        for i in rng.permutation(len(records)):
            rec = records[i]
            opt.zero_grad()
            with ad.Tape() as tape:
                try:
                    out = network_output(weights, rec, normalizer, model)
                except FloatingPointError as exc:
                    raise TrainingDiverged(epoch, str(exc), history) from exc
                loss = season_loss(config.variant, out, rec,
                                   None if physics is None else physics[rec.key], config.pinn_p)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch, f"non-finite loss on season {rec.key}", history)
            ad.backward(loss)
            tape.clear()
            try:
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, str(exc), history) from exc
            total += loss.item()
        mean_loss = total / len(records)
        opt.lr = sched.step(mean_loss)
        history.record(mean_loss, opt.lr, time.perf_counter() - t0)
        log.debug("epoch %d loss %.6g lr %.3g", epoch, mean_loss, opt.lr)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, weights)
    return history


def train_stationary(dataset: Dataset, records: list[SeasonRecord], config: TrainConfig,
                     steps: int | None = None) -> tuple[StationaryParams, TrainHistory]:
    """Fit one stationary parameter vector per cultivar by gradient descent.

    The free variable is unconstrained; ``tanh`` keeps the normalized vector
    inside ``[-1, 1]`` before rescaling, as for the network head.
    """
    model = dataset.model
    space = bp.SPACES[model]
    steps = steps or config.stationary_steps or config.epochs
    by_cultivar: dict[str, list[SeasonRecord]] = {}
    for r in records:
        by_cultivar.setdefault(r.cultivar, []).append(r)
    history = TrainHistory()
    params: dict[str, np.ndarray] = {}
    losses = np.zeros(steps)
    for cultivar in sorted(by_cultivar):
        recs = by_cultivar[cultivar]
        u = Tensor(np.zeros(space.k), requires_grad=True)
        opt = Adam([u], lr=config.lr)
        sched = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience)
        for step in range(steps):
            opt.zero_grad()
            z = ad.tanh(u)
            phys = bp.rescale_params(z, space)
            loss_terms = []
            for rec in recs:
                loss_terms.append(state_loss(bp.run_season(model, phys, rec.temperature), rec))
            loss = ad.mul(ad.sum(ad.stack(loss_terms)), 1.0 / len(recs))
            ad.backward(loss)
            opt.step()
            opt.lr = sched.step(loss.item())
            losses[step] += loss.item() / len(by_cultivar)
        params[cultivar] = bp.rescale_params(np.tanh(u.value), space).value
    for step in range(steps):
        history.record(float(losses[step]), config.lr, 0.0)
    return StationaryParams(model, params), history


def physics_series(stationary: StationaryParams, record: SeasonRecord) -> np.ndarray:
    """Biophysical output under stationary parameters, in label units."""
    pred = bp.run_season(stationary.model, stationary.params[record.cultivar], record.temperature)
    if stationary.model == "gdd":
        return bp.stage_to_label(pred.stages).astype(np.float64)
    return pred.state.value


def train_stl_cultivar(dataset: Dataset, split: DatasetSplit, config: TrainConfig, cultivar: str,
                       normalizer: Normalizer) -> tuple[NetworkWeights, TrainHistory]:
    """One single-task model; seeded by the cultivar's position so runs are order-free."""
    seed = config.seed + split.cultivars.index(cultivar)
    recs = split.train_records(dataset, cultivar)
    w = init_weights(build_config("dmc_stl", dataset, normalizer, config.scale), seed)
    history = _train_network(w, recs, normalizer, dataset.model, replace(config, seed=seed))
    return w, history


def merge_histories(histories: list[TrainHistory]) -> TrainHistory:
    """Mean loss and lr, summed wall time, epoch by epoch."""
    merged = TrainHistory()
    for e in range(min(len(h) for h in histories)):
        merged.record(float(np.mean([h.loss[e] for h in histories])),
                      float(np.mean([h.lr[e] for h in histories])),
                      float(np.sum([h.wall_time[e] for h in histories])))
    return merged


def train(variant: str, dataset: Dataset, split: DatasetSplit, config: TrainConfig | None = None,
          physics_source: StationaryParams | None = None, on_epoch=None) -> TrainResult:
    """Train ``variant`` on the split's training seasons.

    ``on_epoch(epoch, loss, weights)`` is called after every epoch of the
    network variants.
    """
    config = replace(config or TrainConfig(), variant=variant)
    if variant == "classification_mtl" and dataset.kind != "phenology":
        raise ValueError("classification baseline is defined for phenology only")
    normalizer = fit_normalizer(dataset, split)
    records = split.train_records(dataset)
    if not records:
        raise ValueError("split has no training seasons")
    model = dataset.model

    if variant == "stationary_gd":
        stationary, history = train_stationary(dataset, records, config)
        return TrainResult(variant, config, normalizer, history, stationary=stationary)

    if variant == "dmc_stl":
        parts = [train_stl_cultivar(dataset, split, config, c, normalizer) for c in split.cultivars]
        return TrainResult(variant, config, normalizer, merge_histories([h for _, h in parts]),
                           per_cultivar=dict(zip(split.cultivars, (w for w, _ in parts))))

    physics = None
    if variant == "pinn_mtl":
        if physics_source is None:
            physics_source, _ = train_stationary(dataset, records, config)
        physics = {r.key: physics_series(physics_source, r) for r in records}

    weights = init_weights(build_config(variant, dataset, normalizer, config.scale), config.seed)
    history = _train_network(weights, records, normalizer, model, config, physics, on_epoch)
    return TrainResult(variant, config, normalizer, history, weights=weights,
                       physics_source=physics_source)


# ---------------------------------------------------------------- prediction

@dataclass
class SeasonPrediction:
    """Evaluation view of one season's output for any variant.

    ``stages`` is the daily stage series on which onsets were found (chain
    stages for biophysical variants, rounded or argmax labels otherwise);
    ``series`` is the continuous daily output.
    """
    series: np.ndarray
    stages: np.ndarray | None = None
    onsets: tuple[int | None, int | None, int | None] | None = None


def predict_season(result: TrainResult, record: SeasonRecord) -> SeasonPrediction:
    model = KINDS[record.kind]
    if result.variant == "stationary_gd":
        if record.cultivar not in result.stationary.params:
            raise KeyError(f"no stationary parameters for cultivar {record.cultivar}")
        out = bp.run_season(model, result.stationary.params[record.cultivar], record.temperature)
    else:
        weights = result.per_cultivar[record.cultivar] if result.per_cultivar else result.weights
        with ad.Tape() as tape:
            out = network_output(weights, record, result.normalizer, model)
        tape.clear()
    if isinstance(out, bp.CropPrediction):
        return SeasonPrediction(out.state.value, out.stages, out.onsets)
    values = out.value
    if record.kind != "phenology":
        return SeasonPrediction(values)
    if result.variant == "classification_mtl":
        stages = np.argmax(values, axis=-1)
        series = stages.astype(np.float64)
    else:
        series = values
        stages = np.rint(values).astype(np.int64)
    return SeasonPrediction(series, stages, bp.extract_onsets(stages, strict=False))


# ---------------------------------------------------------------- checkpoints

def save_result(result: TrainResult, out_dir) -> list[Path]:
    """Write everything needed to predict with ``result``; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def dump(name, obj):
        path = out / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        written.append(path)

    dump("train_config.json", result.config.to_dict())
    dump("normalizer.json", result.normalizer.to_dict())
    if result.weights is not None:
        result.weights.save(out / "weights")
        written += [out / "weights.bin", out / "weights.json"]
    if result.per_cultivar:
        for cultivar, w in sorted(result.per_cultivar.items()):
            w.save(out / f"weights_{cultivar}")
            written += [out / f"weights_{cultivar}.bin", out / f"weights_{cultivar}.json"]
    for name, st in (("parameters.json", result.stationary),
                     ("physics_parameters.json", result.physics_source)):
        if st is not None:
            space = bp.SPACES[st.model]
            dump(name, {"model": st.model, "names": space.names,
                        "parameters": {c: [float(x) for x in v] for c, v in sorted(st.params.items())}})
    return written


def _load_stationary(path: Path) -> StationaryParams | None:
    if not path.exists():
        return None
    d = json.loads(path.read_text())
    return StationaryParams(d["model"], {c: np.array(v) for c, v in d["parameters"].items()})


def load_result(out_dir) -> TrainResult:
    out = Path(out_dir)
    config = TrainConfig(**json.loads((out / "train_config.json").read_text()))
    normalizer = Normalizer.from_dict(json.loads((out / "normalizer.json").read_text()))
    weights = NetworkWeights.load(out / "weights") if (out / "weights.bin").exists() else None
    per = {p.stem[len("weights_"):]: NetworkWeights.load(out / p.stem)
           for p in sorted(out.glob("weights_*.bin"))} or None
    return TrainResult(config.variant, config, normalizer, TrainHistory(), weights=weights,
                       per_cultivar=per, stationary=_load_stationary(out / "parameters.json"),
                       physics_source=_load_stationary(out / "physics_parameters.json"))
