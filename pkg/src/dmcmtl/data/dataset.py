"""Season records, dataset manifests, observation files and train/test splits.

Observation CSVs (one file per cultivar and region)::

    phenology:       cultivar,season,date,stage      stage in {budbreak,bloom,veraison}
    cold-hardiness:  cultivar,season,date,lte50
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .pipeline import (DataError, Normalizer, SeasonDiscarded, clean_season,
                       fill_phenology_labels, mask_cold_hardiness)
from .weather import TEMP_COLUMN, WINDOWS, WeatherSeries, read_weather_csv, season_weather

log = logging.getLogger(__name__)

KINDS = {"phenology": "gdd", "cold_hardiness": "ferguson"}
STAGE_NAMES = ("budbreak", "bloom", "veraison")
TEST_SEASONS = 2


@dataclass
class SeasonRecord:
    cultivar: str
    cultivar_id: int
    season: int
    region: str
    kind: str
    weather: WeatherSeries
    labels: np.ndarray
    mask: np.ndarray
    onsets: tuple[int, int, int] | None = None

    @property
    def key(self) -> tuple[str, int]:
        return self.cultivar, self.season

    @property
    def n_days(self) -> int:
        return self.weather.n_days

    @property
    def temperature(self) -> np.ndarray:
        return self.weather.column(TEMP_COLUMN)


@dataclass
class Dataset:
    kind: str
    cultivars: list[str]
    features: tuple[str, ...]
    train_region: str
    window: tuple[str, str]
    records: list[SeasonRecord]
    discarded: list[tuple[str, str, int, str]] = field(default_factory=list)
    truth: dict[str, list[float]] | None = None

    @property
    def model(self) -> str:
        return KINDS[self.kind]

    @property
    def regions(self) -> list[str]:
        return sorted({r.region for r in self.records} | {self.train_region})

    def cultivar_id(self, name: str) -> int:
        return self.cultivars.index(name)

    def select(self, region: str | None = None, cultivar: str | None = None,
               keys=None) -> list[SeasonRecord]:
        out = []
        for r in self.records:
            if region is not None and r.region != region:
                continue
            if cultivar is not None and r.cultivar != cultivar:
                continue
            if keys is not None and r.key not in keys:
                continue
            out.append(r)
        return out


@dataclass
class DatasetSplit:
    """Held-out seasons per cultivar; keys are ``(cultivar, season)``."""
    seed: int
    train: dict[str, list[int]]
    test: dict[str, list[int]]

    def train_keys(self) -> set[tuple[str, int]]:
        return {(c, s) for c, seasons in self.train.items() for s in seasons}

    def test_keys(self) -> set[tuple[str, int]]:
        return {(c, s) for c, seasons in self.test.items() for s in seasons}

    @property
    def cultivars(self) -> list[str]:
        return sorted(self.train)

    def train_records(self, dataset: Dataset, cultivar: str | None = None) -> list[SeasonRecord]:
        return dataset.select(dataset.train_region, cultivar, self.train_keys())

    def test_records(self, dataset: Dataset, region: str | None = None) -> list[SeasonRecord]:
        return dataset.select(region or dataset.train_region, None, self.test_keys())

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": self.train, "test": self.test}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(int(d["seed"]), {k: list(v) for k, v in d["train"].items()},
                   {k: list(v) for k, v in d["test"].items()})


def make_split(dataset: Dataset, seed: int) -> DatasetSplit:
    """Hold out two training-region seasons per cultivar, chosen uniformly."""
    rng = np.random.default_rng(seed)
    train, test = {}, {}
    for cultivar in dataset.cultivars:
        seasons = sorted({r.season for r in dataset.select(dataset.train_region, cultivar)})
        if len(seasons) < TEST_SEASONS + 1:
            warnings.warn(f"cultivar {cultivar} has {len(seasons)} seasons; excluded from split")
            continue
        held = set(rng.choice(seasons, size=TEST_SEASONS, replace=False).tolist())
        test[cultivar] = [s for s in seasons if s in held]
        train[cultivar] = [s for s in seasons if s not in held]
    return DatasetSplit(seed, train, test)


def fit_normalizer(dataset: Dataset, split: DatasetSplit) -> Normalizer:
    return Normalizer.fit([r.weather for r in split.train_records(dataset)])


# ---------------------------------------------------------------- files

def read_observations(path, kind: str) -> pd.DataFrame:
    df = pd.read_csv(path, parse_dates=["date"], float_precision="round_trip")
    expected = ["cultivar", "season", "date", "stage" if kind == "phenology" else "lte50"]
    if list(df.columns) != expected:
        raise DataError(f"{path}: columns {list(df.columns)} != {expected}")
    if kind == "phenology":
        bad = set(df["stage"]) - set(STAGE_NAMES)
        if bad:
            raise DataError(f"{path}: unknown stages {sorted(bad)}")
    return df


def write_observations(df: pd.DataFrame, path) -> None:
    out = df.copy()
    out["date"] = pd.to_datetime(out["date"]).dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False, float_format="%.17g")


def _season_record(kind, cultivar, cid, season, weather, obs) -> SeasonRecord:
    start = pd.Timestamp(weather.dates[0])
    if kind == "phenology":
        onsets = []
        for name in STAGE_NAMES:
            rows = obs[obs["stage"] == name]
            onsets.append(int((rows["date"].min() - start).days) if len(rows) else None)
        labels, mask = fill_phenology_labels(onsets, weather.n_days)
        return SeasonRecord(cultivar, cid, season, weather.region, kind, weather, labels, mask,
                            tuple(onsets))
    lte = np.full(weather.n_days, np.nan)
    idx = (obs["date"] - start).dt.days.to_numpy()
    inside = (idx >= 0) & (idx < weather.n_days)
    lte[idx[inside]] = obs["lte50"].to_numpy()[inside]
    labels, mask = mask_cold_hardiness(lte)
    return SeasonRecord(cultivar, cid, season, weather.region, kind, weather, labels, mask)


def load_dataset(manifest_path) -> Dataset:
    """Read a dataset manifest and build cleaned, labelled season records."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    m = json.loads(manifest_path.read_text())
    kind = m["kind"]
    if kind not in KINDS:
        raise DataError(f"unknown dataset kind {kind!r}")
    window = tuple(m.get("window") or WINDOWS[kind])
    features = tuple(m["features"])
    cultivars = list(m["cultivars"])
    records, discarded = [], []
    for region, entry in sorted(m["regions"].items()):
        wpath = root / entry["weather"]
        if not wpath.exists():
            raise FileNotFoundError(wpath)
        table = read_weather_csv(wpath)
        for cultivar, opath in sorted(entry["observations"].items()):
            obs = read_observations(root / opath, kind)
            cid = cultivars.index(cultivar)
            for season, rows in obs.groupby("season", sort=True):
                season = int(season)
                try:
                    weather = clean_season(season_weather(table, season, window, features))
                    records.append(_season_record(kind, cultivar, cid, season, weather, rows))
                except SeasonDiscarded as exc:
                    discarded.append((region, cultivar, season, exc.reason))
                    log.info("discarded %s/%s/%d: %s", region, cultivar, season, exc.reason)
    truth = None
    if m.get("truth"):
        truth = json.loads((root / m["truth"]).read_text())["parameters"]
    return Dataset(kind, cultivars, features, m["train_region"], window, records, discarded, truth)
