"""Differentiable GDD phenology and Ferguson cold-hardiness models.

Both models take one parameter vector per day.  Branching on the model state
is written with :func:`~dmcmtl.autodiff.where_select`, so gradients follow the
branch that was taken on the forward pass.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# phenology stage chain
DORMANT, EMERGED, BUD_BREAK, BLOOM, VERAISON, RIPE = range(6)
N_STAGES = 6
ONSET_STAGES = (BUD_BREAK, BLOOM, VERAISON)

CHILL_BASE = 10.0


@dataclass(frozen=True)
class Param:
    name: str
    lo: float
    hi: float
    unit: str = ""

    @property
    def frozen(self) -> bool:
        return self.lo == self.hi


class ParameterSpace:
    """Ordered named parameters, each confined to ``[lo, hi]``."""

    def __init__(self, name: str, params: Sequence[Param]):
        for p in params:
            if p.lo > p.hi:
                raise ValueError(f"{p.name}: lo {p.lo} > hi {p.hi}")
        self.name = name
        self.params = tuple(params)
        self.lo = np.array([p.lo for p in params])
        self.hi = np.array([p.hi for p in params])

    @property
    def k(self) -> int:
        return len(self.params)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, values) -> bool:
        v = np.asarray(values)
        return bool(np.all(v >= self.lo) and np.all(v <= self.hi))

    def vector(self, mapping: dict[str, float]) -> np.ndarray:
        return np.array([mapping[n] for n in self.names], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"name": self.name,
                "parameters": [{"name": p.name, "lo": p.lo, "hi": p.hi, "unit": p.unit}
                               for p in self.params]}

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSpace":
        return cls(d["name"], [Param(p["name"], float(p["lo"]), float(p["hi"]), p.get("unit", ""))
                               for p in d["parameters"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ParameterSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        return isinstance(other, ParameterSpace) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"ParameterSpace({self.name!r}, k={self.k})"


GDD_SPACE = ParameterSpace("gdd", [
    Param("TBASEM", 0.0, 15.0, "C"),
    Param("TEFFMX", 15.0, 45.0, "C"),
    Param("TSUMEM", 10.0, 100.0, "C"),
    Param("TSUM1", 100.0, 1000.0, "C"),
    Param("TSUM2", 100.0, 1000.0, "C"),
    Param("TSUM3", 100.0, 1000.0, "C"),
    Param("TSUM4", 100.0, 1000.0, "C"),
])

FERGUSON_SPACE = ParameterSpace("ferguson", [
    Param("HCINIT", -15.0, 5.0, "C"),
    Param("HCMIN", -5.0, 0.0, "C"),
    Param("HCMAX", -40.0, -20.0, "C"),
    Param("TENDO", 0.0, 10.0, "C"),
    Param("TECO", 0.0, 10.0, "C"),
    Param("ENACCLIM", 0.2, 0.2, "C/C"),
    Param("ECACCLIM", 0.2, 0.2, "C/C"),
    Param("ENDEACCLIM", 0.2, 0.2, "C/C"),
    Param("ECDEACCLIM", 0.2, 0.2, "C/C"),
    Param("ECOBOUND", -800.0, -200.0, "C"),
])

SPACES = {"gdd": GDD_SPACE, "ferguson": FERGUSON_SPACE}


def rescale_params(z, space: ParameterSpace) -> Tensor:
    """Map ``z`` in ``[-1, 1]^k`` (last axis) linearly onto the parameter ranges."""
    z = ad.as_tensor(z)
    if z.value.shape[-1] != space.k:
        raise ValueError(f"expected {space.k} components, got {z.value.shape[-1]}")
    if np.any(np.abs(z.value) > 1.0):
        raise ValueError("normalized parameters must lie in [-1, 1]")
    half_width = 0.5 * (space.hi - space.lo)
    return ad.add(space.lo + half_width, ad.mul(z, half_width))


def normalize_params(values, space: ParameterSpace) -> np.ndarray:
    """Inverse of :func:`rescale_params`; frozen parameters map to 0."""
    v = np.asarray(values, dtype=np.float64)
    width = space.hi - space.lo
    safe = np.where(width > 0, width, 1.0)
    return np.where(width > 0, 2.0 * (v - space.lo) / safe - 1.0, 0.0)


# ---------------------------------------------------------------- GDD model

@dataclass
class PhenologyState:
    stage: int
    accumulator: Tensor

    @classmethod
    def initial(cls) -> "PhenologyState":
        return cls(DORMANT, Tensor(0.0))


def gdd_daily_increment(t_mean, t_base, t_max) -> Tensor:
    """Degree days for one day, ``max(0, min(T_m, T - T_b))``."""
    return ad.maximum(0.0, ad.minimum(t_max, ad.sub(t_mean, t_base)))


def gdd_step(state: PhenologyState, increment, thresholds) -> tuple[PhenologyState, Tensor]:
    """Advance the stage chain by one day.

    ``thresholds`` holds ``[TSUMEM, TSUM1, TSUM2, TSUM3, TSUM4]`` for the day.
    Degree days beyond a threshold carry over into the next stage.
    """
    thresholds = ad.as_tensor(thresholds)
    if np.any(thresholds.value <= 0):
        raise ValueError("stage thresholds must be positive")
    stage = state.stage
    acc = ad.add(state.accumulator, increment)
    while stage < RIPE:
        theta = thresholds[stage]
        cond = acc.value >= theta.value
        if not cond:
            break
        acc = ad.where_select(cond, ad.sub(acc, theta), acc)
        stage += 1
    theta = thresholds[min(stage, RIPE - 1)]
    progress = ad.add(float(stage), ad.minimum(1.0, ad.div(acc, theta)))
    y = ad.where_select(stage == RIPE, float(RIPE), progress)
    return PhenologyState(stage, acc), y


# ---------------------------------------------------------------- Ferguson model

_HCINIT, _HCMIN, _HCMAX, _TENDO, _TECO, _ENACC, _ECACC, _ENDEACC, _ECDEACC, _ECOBOUND = range(10)


@dataclass
class ColdHardinessState:
    hardiness: Tensor
    chill_sum: float = 0.0
    eco: bool = False

    @property
    def dormancy(self) -> str:
        return "eco" if self.eco else "endo"


def ferguson_step(state: ColdHardinessState, t_mean: float, params) -> tuple[ColdHardinessState, Tensor]:
    """One day of acclimation / deacclimation; returns the new LTE50."""
    p = ad.as_tensor(params)
    hcmin, hcmax = p[_HCMIN], p[_HCMAX]
    if np.any(hcmin.value <= hcmax.value):
        raise ValueError("HCMIN must exceed HCMAX")
    t_mean = float(t_mean)
    chill = state.chill_sum + min(0.0, t_mean - CHILL_BASE)
    eco = state.eco or bool(chill <= p.value[_ECOBOUND])

    t_th = ad.where_select(eco, p[_TECO], p[_TENDO])
    acclimating = bool(t_mean <= t_th.value)
    rate = ad.where_select(
        acclimating,
        ad.where_select(eco, p[_ECACC], p[_ENACC]),
        ad.where_select(eco, p[_ECDEACC], p[_ENDEACC]),
    )
    h = state.hardiness
    # hardening stalls at HCMAX, dehardening stalls at HCMIN
    headroom = ad.where_select(acclimating, ad.sub(h, hcmax), ad.sub(hcmin, h))
    bounding = ad.div(headroom, ad.sub(hcmin, hcmax))
    delta = ad.mul(ad.mul(rate, ad.sub(t_mean, t_th)), bounding)
    h_new = ad.maximum(ad.minimum(ad.add(h, delta), hcmin), hcmax)
    return ColdHardinessState(h_new, chill, eco), h_new


# ---------------------------------------------------------------- rollouts

@dataclass
class CropPrediction:
    """Daily model output for one season.

    ``state`` is the continuous output (development value or LTE50); ``stages``
    and ``onsets`` are only set for phenology.
    """
    state: Tensor
    stages: np.ndarray | None = None
    onsets: tuple[int | None, int | None, int | None] | None = None


def _daily(daily_params, n_days: int, k: int) -> Tensor:
    p = ad.as_tensor(daily_params)
    if p.value.ndim == 1:
        p = Tensor(np.broadcast_to(p.value, (n_days, k)).copy()) if not p.requires_grad \
            else ad.add(p, np.zeros((n_days, k)))
    if p.value.shape != (n_days, k):
        raise ValueError(f"daily params shape {p.value.shape} != {(n_days, k)}")
    return p


def run_season(model: str, daily_params, temperature) -> CropPrediction:
    """Roll a model over one season of daily mean temperature.

    ``daily_params`` is ``(T, k)`` (or ``(k,)`` for stationary parameters) in
    physical units.
    """
    temps = np.asarray(temperature, dtype=np.float64)
    n = temps.shape[0]
    if n == 0:
        raise ValueError("empty season")
    if model == "gdd":
        return _gdd_rollout(_daily(daily_params, n, GDD_SPACE.k), temps)
    if model == "ferguson":
        p = _daily(daily_params, n, FERGUSON_SPACE.k)
        state = ColdHardinessState(p[0, _HCINIT])
        ys = []
        for t in range(n):
            state, y = ferguson_step(state, temps[t], p[t])
            ys.append(y)
        return CropPrediction(ad.stack(ys))
    raise ValueError(f"unknown model {model!r}")


def _gdd_transitions(inc: np.ndarray, thresholds: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Plain-float pass of the stage chain: daily stage and every (day, stage left)."""
    stages = np.empty(inc.shape[0], dtype=np.int64)
    crossed = []
    stage, acc = DORMANT, 0.0
    for t in range(inc.shape[0]):
        acc += inc[t]
        while stage < RIPE and acc >= thresholds[t, stage]:
            acc -= thresholds[t, stage]
            crossed.append((t, stage))
            stage += 1
        stages[t] = stage
    return stages, crossed


def _gdd_rollout(p: Tensor, temps: np.ndarray) -> CropPrediction:
    """Season rollout of the stage chain without a per-day graph.

    Transitions are found on plain floats first.  The accumulator is then
    the running degree-day sum minus every threshold crossed so far, which is
    what :func:`gdd_step` computes day by day, so values and gradients agree.
    """
    n = temps.shape[0]
    thresholds = p[:, 2:]
    if np.any(thresholds.value <= 0):
        raise ValueError("stage thresholds must be positive")
    inc = gdd_daily_increment(temps, p[:, 0], p[:, 1])
    stages, crossed = _gdd_transitions(inc.value, thresholds.value)
    total = ad.cumsum(inc)
    if crossed:
        days = np.array([c[0] for c in crossed])
        which = np.array([c[1] for c in crossed])
        spent = ad.getitem(thresholds, (days, which))
        scatter = np.zeros((n, len(crossed)))
        scatter[days, np.arange(len(crossed))] = 1.0
        total = ad.sub(total, ad.cumsum(ad.matmul(scatter, spent)))
    capped = np.minimum(stages, RIPE - 1)
    theta = ad.getitem(thresholds, (np.arange(n), capped))
    progress = ad.add(stages.astype(np.float64), ad.minimum(1.0, ad.div(total, theta)))
    y = ad.where_select(stages == RIPE, float(RIPE), progress)
    return CropPrediction(y, stages, extract_onsets(stages))


def extract_onsets(stages, strict: bool = True) -> tuple[int | None, int | None, int | None]:
    """First day at or beyond bud break, bloom and veraison.

    With ``strict`` a stage series that ever decreases raises ``ValueError``;
    otherwise the first crossing is reported regardless.
    """
    s = np.asarray(stages)
    if strict and s.size > 1 and np.any(np.diff(s) < 0):
        bad = int(np.flatnonzero(np.diff(s) < 0)[0])
        raise ValueError(f"biologically inconsistent stage series: regresses after day {bad}")
    out = []
    for stage in ONSET_STAGES:
        hits = np.flatnonzero(s >= stage)
        out.append(int(hits[0]) if hits.size else None)
    return tuple(out)


def stage_to_label(stages) -> np.ndarray:
    """Collapse the six-state chain onto the observable label set {0, 2, 3, 4}."""
    s = np.asarray(stages)
    return np.where(s < BUD_BREAK, 0, np.minimum(s, VERAISON))
