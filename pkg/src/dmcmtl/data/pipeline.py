"""Season cleaning, z-scoring, date embedding and label construction."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..biophysical import BLOOM, BUD_BREAK, DORMANT, VERAISON
from .weather import WeatherSeries

MAX_MISSING_FRACTION = 0.10
YEAR_DAYS = 365.25


class DataError(ValueError):
    pass


class SeasonDiscarded(DataError):
    """A season that fails a quality rule; ``reason`` says which."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def clean_season(raw: WeatherSeries, max_missing: float = MAX_MISSING_FRACTION) -> WeatherSeries:
    """Drop seasons with too many gaps, linearly interpolate the rest.

    Gaps at the season edges take the nearest observed value.
    """
    missing = raw.missing
    frac = missing.mean(axis=0)
    for name, f in zip(raw.names, frac):
        if f >= 1.0:
            raise SeasonDiscarded(f"{name}: entirely missing")
        if f > max_missing:
            raise SeasonDiscarded(f"{name}: {f:.1%} missing exceeds {max_missing:.0%}")
    if not missing.any():
        return raw
    values = raw.values.copy()
    days = np.arange(raw.n_days)
    for j in np.flatnonzero(missing.any(axis=0)):
        ok = ~missing[:, j]
        values[~ok, j] = np.interp(days[~ok], days[ok], values[ok, j])
    return raw.replace(values)


def date_embedding(day_of_year):
    """``(sin, cos)`` of the day of year on a 365.25-day period."""
    d = np.asarray(day_of_year)
    if np.any(d < 1) or np.any(d > 366):
        raise ValueError(f"day of year out of range: {day_of_year}")
    return periodic_embedding(d)


def periodic_embedding(day):
    phase = 2 * np.pi * np.asarray(day, dtype=np.float64) / YEAR_DAYS
    return np.sin(phase), np.cos(phase)


@dataclass
class Normalizer:
    """Per-feature z-scores with population std; constant features map to 0."""
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, series: list[WeatherSeries]) -> "Normalizer":
        if not series:
            raise DataError("cannot fit normalization on zero seasons")
        X = np.concatenate([s.values for s in series])
        if np.isnan(X).any():
            raise DataError("normalization needs cleaned seasons")
        return cls(tuple(series[0].names), X.mean(axis=0), X.std(axis=0))

    def transform(self, values: np.ndarray) -> np.ndarray:
        safe = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (values - self.mean) / safe, 0.0)

    def features(self, weather: WeatherSeries) -> np.ndarray:
        """Network inputs: z-scored features followed by the date embedding."""
        if tuple(weather.names) != self.names:
            raise DataError(f"feature columns {weather.names} != {self.names}")
        sin, cos = date_embedding(weather.day_of_year)
        return np.column_stack([self.transform(weather.values), sin, cos])

    @property
    def input_dim(self) -> int:
        return len(self.names) + 2

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(tuple(d["names"]), np.array(d["mean"]), np.array(d["std"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Normalizer":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fill_phenology_labels(onsets, n_days: int) -> tuple[np.ndarray, np.ndarray]:
    """Daily stage labels carried forward from the bud break/bloom/veraison onsets."""
    if len(onsets) != 3 or any(d is None for d in onsets):
        raise SeasonDiscarded("season does not record bud break, bloom and veraison")
    bb, bl, ve = (int(d) for d in onsets)
    if not 0 <= bb <= bl <= ve < n_days:
        raise SeasonDiscarded(f"onsets out of order or outside window: {onsets}")
    labels = np.full(n_days, float(DORMANT))
    labels[bb:] = BUD_BREAK
    labels[bl:] = BLOOM
    labels[ve:] = VERAISON
    return labels, np.ones(n_days, dtype=bool)


def mask_cold_hardiness(lte50) -> tuple[np.ndarray, np.ndarray]:
    """Mask exactly the observed days; unobserved labels are zeroed, not filled."""
    y = np.asarray(lte50, dtype=np.float64)
    mask = ~np.isnan(y)
    if not mask.any():
        raise SeasonDiscarded("no valid LTE50 observation")
    return np.where(mask, y, 0.0), mask


def mask_random(n_days: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Keep mask with ``round(rate * n)`` days removed (at least one kept)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("mask rate must be in [0, 1)")
    n_drop = min(int(round(rate * n_days)), n_days - 1)
    keep = np.ones(n_days, dtype=bool)
    keep[rng.choice(n_days, size=n_drop, replace=False)] = False
    return keep
