"""Onset and series errors, consistency audit, threshold curves, region tables, seed aggregation."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .data.dataset import STAGE_NAMES, Dataset, DatasetSplit, SeasonRecord
from .training import TrainResult, predict_season


def _onset_errors(predicted, observed, window_end: int) -> np.ndarray:
    if len(predicted) != len(observed):
        raise ValueError("predicted and observed onsets differ in length")
    pred = np.array([window_end if p is None else p for p in predicted], dtype=np.float64)
    return pred - np.asarray(observed, dtype=np.float64)


def phenology_rmse(predicted, observed, window_end: int | None = None) -> float:
    """Root mean square onset error in days over bud break, bloom and veraison.

    A stage the prediction never reaches counts as reached on ``window_end``.
    """
    if any(p is None for p in predicted) and window_end is None:
        raise ValueError("window_end is needed when a predicted stage is missing")
    err = _onset_errors(predicted, observed, window_end if window_end is not None else 0)
    return float(np.sqrt(np.mean(err ** 2)))


def series_rmse(pred, obs, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask selects no days")
    d = np.asarray(pred, dtype=np.float64)[mask] - np.asarray(obs, dtype=np.float64)[mask]
    return float(np.sqrt(np.mean(d ** 2)))


@dataclass
class Audit:
    violations: int
    days: list[int]


def consistency_audit(stages) -> Audit:
    """Days ``t`` where the stage on day ``t + 1`` is lower than on day ``t``."""
    s = np.asarray(stages)
    days = np.flatnonzero(np.diff(s) < 0).tolist() if s.size > 1 else []
    return Audit(len(days), days)


@dataclass
class SeasonEval:
    cultivar: str
    season: int
    region: str
    onset_errors: tuple[float, float, float] | None = None
    series_rmse: float | None = None
    violations: int = 0
    violation_days: list[int] = field(default_factory=list)

    @property
    def rmse(self) -> float:
        if self.onset_errors is not None:
            return float(np.sqrt(np.mean(np.square(self.onset_errors))))
        return float(self.series_rmse)


def evaluate_season(result: TrainResult, record: SeasonRecord) -> SeasonEval:
    pred = predict_season(result, record)
    if record.kind == "phenology":
        # window end is the last day index of the season
        errors = _onset_errors(pred.onsets, record.onsets, record.n_days - 1)
        audit = consistency_audit(pred.stages)
        return SeasonEval(record.cultivar, record.season, record.region, tuple(errors.tolist()),
                          None, audit.violations, audit.days)
    return SeasonEval(record.cultivar, record.season, record.region, None,
                      series_rmse(pred.series, record.labels, record.mask))


def evaluate(result: TrainResult, records: list[SeasonRecord]) -> list[SeasonEval]:
    return [evaluate_season(result, r) for r in records]


def cultivar_rmse(evals: list[SeasonEval]) -> dict[str, float]:
    """Per-cultivar RMSE pooled over all seasons (and stages for phenology)."""
    out = {}
    for cultivar in sorted({e.cultivar for e in evals}):
        rows = [e for e in evals if e.cultivar == cultivar]
        if rows[0].onset_errors is not None:
            err = np.concatenate([np.asarray(e.onset_errors) for e in rows])
            out[cultivar] = float(np.sqrt(np.mean(err ** 2)))
        else:
            out[cultivar] = float(np.sqrt(np.mean([e.series_rmse ** 2 for e in rows])))
    return out


def mean_rmse(evals: list[SeasonEval]) -> float:
    """Average of the per-cultivar RMSEs."""
    return float(np.mean(list(cultivar_rmse(evals).values())))


def per_stage_error(evals: list[SeasonEval]) -> dict[str, dict[str, float]]:
    """Onset RMSE per stage, per cultivar and under ``"all"``."""
    if not evals:
        raise ValueError("no seasons to summarize")

    def rmse(rows):
        err = np.array([e.onset_errors for e in rows], dtype=np.float64)
        return dict(zip(STAGE_NAMES, np.sqrt(np.mean(err ** 2, axis=0)).tolist()))

    out = {c: rmse([e for e in evals if e.cultivar == c]) for c in sorted({e.cultivar for e in evals})}
    out["all"] = rmse(evals)
    return out


def threshold_curve(rmses, thresholds) -> np.ndarray:
    """Fraction of cultivars whose RMSE is at or below each threshold."""
    r = np.sort(np.asarray(list(rmses), dtype=np.float64))
    if r.size == 0:
        raise ValueError("no cultivar RMSEs")
    t = np.asarray(thresholds, dtype=np.float64)
    return np.searchsorted(r, t, side="right") / r.size


def cross_region_eval(result: TrainResult, dataset: Dataset, split: DatasetSplit,
                      regions=None) -> dict[str, float]:
    """Mean test RMSE per region, always with the training region's normalization."""
    regions = list(regions) if regions is not None else dataset.regions
    out = {}
    for region in regions:
        if region not in dataset.regions:
            raise KeyError(f"unknown region {region!r}; dataset has {dataset.regions}")
        records = split.test_records(dataset, region)
        if not records:
            raise ValueError(f"region {region} has no test seasons")
        out[region] = mean_rmse(evaluate(result, records))
    return out


# ---------------------------------------------------------------- seeds

@dataclass
class SeedSummary:
    mean: float
    std: float
    n: int


def aggregate_seeds(values) -> SeedSummary:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size < 2:
        raise ValueError("aggregation needs at least two seeds")
    return SeedSummary(float(v.mean()), float(v.std(ddof=1)), int(v.size))


@dataclass
class PairedTest:
    t: float
    p: float
    n: int
    degenerate: bool

    @property
    def significant(self) -> bool:
        return not self.degenerate and self.p < 0.05


def paired_t_test(a, b) -> PairedTest:
    """Two-sided paired t-test on ``a - b``; zero variance is flagged, not raised."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = d.size
    if n < 2:
        raise ValueError("paired test needs at least two pairs")
    if d.std(ddof=1) == 0.0:
        t = 0.0 if d.mean() == 0 else math.copysign(math.inf, d.mean())
        return PairedTest(t, 1.0 if t == 0 else 0.0, n, True)
    res = stats.ttest_rel(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return PairedTest(float(res.statistic), float(res.pvalue), n, False)


# ---------------------------------------------------------------- reports

REPORT_COLUMNS = ("variant", "seed", "cultivar", "region", "rmse", "n_seasons", "violations")


def report_rows(variant: str, seed: int, evals: list[SeasonEval]) -> list[dict]:
    per = cultivar_rmse(evals)
    rows = []
    for cultivar, rmse in per.items():
        sub = [e for e in evals if e.cultivar == cultivar]
        regions = sorted({e.region for e in sub})
        rows.append({"variant": variant, "seed": seed, "cultivar": cultivar,
                     "region": "+".join(regions), "rmse": rmse, "n_seasons": len(sub),
                     "violations": sum(e.violations for e in sub)})
    return rows


def write_csv(path, rows: list[dict], columns=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else ()))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def season_rows(evals: list[SeasonEval]) -> list[dict]:
    rows = []
    for e in evals:
        d = asdict(e)
        d.pop("violation_days")
        errs = d.pop("onset_errors")
        if errs is not None:
            d.update({f"{s}_error": v for s, v in zip(STAGE_NAMES, errs)})
        d["rmse"] = e.rmse
        rows.append(d)
    return rows


def summary_table(rows: list[dict]) -> tuple[list[dict], str]:
    """Per-variant, per-cultivar mean and std over seeds plus an aggregate row.

    ``rows`` are report rows (as written or as read back from CSV).  Returns
    the table rows and a plain-text rendering.
    """
    table = []
    variants = sorted({r["variant"] for r in rows})
    for variant in variants:
        vrows = [r for r in rows if r["variant"] == variant]
        for cultivar in sorted({r["cultivar"] for r in vrows}):
            vals = [float(r["rmse"]) for r in vrows if r["cultivar"] == cultivar]
            table.append(_summary_row(variant, cultivar, vals))
        seeds = sorted({int(r["seed"]) for r in vrows})
        per_seed = [np.mean([float(r["rmse"]) for r in vrows if int(r["seed"]) == s]) for s in seeds]
        table.append(_summary_row(variant, "all", per_seed))
    lines = [f"{'variant':<20} {'cultivar':<24} {'rmse':>8} {'std':>8} {'seeds':>5}"]
    for row in table:
        lines.append(f"{row['variant']:<20} {row['cultivar']:<24} {row['mean']:8.3f} "
                     f"{row['std']:8.3f} {row['n']:5d}")
    return table, "\n".join(lines) + "\n"


def _summary_row(variant, cultivar, values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return {"variant": variant, "cultivar": cultivar, "mean": float(v.mean()), "std": std,
            "n": int(v.size)}
