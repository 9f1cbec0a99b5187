"""Synthetic benchmark: stationary per-cultivar parameters rolled over real-format weather."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .. import biophysical as bp
from .dataset import (KINDS, STAGE_NAMES, Dataset, _season_record, write_observations)
from .pipeline import SeasonDiscarded, clean_season, mask_random
from .weather import (SYNTHETIC_FEATURES, TEMP_COLUMN, WINDOWS, season_weather, window_dates,
                      write_weather_csv)

MODEL_KIND = {v: k for k, v in KINDS.items()}


def sample_true_parameters(space: bp.ParameterSpace, rng: np.random.Generator,
                           interior: float = 0.6) -> np.ndarray:
    """One draw, uniform over the central ``interior`` fraction of every range."""
    mid = space.midpoint()
    half = 0.5 * interior * (space.hi - space.lo)
    return rng.uniform(mid - half, mid + half)


def available_seasons(weather: dict[str, pd.DataFrame], window) -> list[int]:
    years = None
    for table in weather.values():
        first, last = table.index[0], table.index[-1]
        ok = {y for y in range(first.year, last.year + 1)
              if window_dates(y, window)[0] >= first and window_dates(y, window)[-1] <= last}
        years = ok if years is None else years & ok
    return sorted(years or ())


def _clean_window(table, season, window, features):
    try:
        return clean_season(season_weather(table, season, window, features))
    except SeasonDiscarded:
        return None


def _reaches_veraison(params, weathers) -> bool:
    for w in weathers:
        onsets = bp.run_season("gdd", params, w.column(TEMP_COLUMN)).onsets
        if onsets[-1] is None:
            return False
    return True


@dataclass
class SyntheticData:
    kind: str
    features: tuple[str, ...]
    window: tuple[str, str]
    train_region: str
    cultivars: list[str]
    truth: dict[str, list[float]]
    observations: dict[str, dict[str, pd.DataFrame]] = field(default_factory=dict)

    @property
    def model(self) -> str:
        return KINDS[self.kind]

    def to_dataset(self, weather: dict[str, pd.DataFrame]) -> Dataset:
        """Build records in memory exactly as :func:`load_dataset` would from files."""
        records, discarded = [], []
        for region in sorted(self.observations):
            for cultivar in sorted(self.observations[region]):
                obs = self.observations[region][cultivar].copy()
                obs["date"] = pd.to_datetime(obs["date"])
                cid = self.cultivars.index(cultivar)
                for season, rows in obs.groupby("season", sort=True):
                    try:
                        w = clean_season(season_weather(weather[region], int(season), self.window,
                                                        self.features))
                        records.append(_season_record(self.kind, cultivar, cid, int(season), w, rows))
                    except SeasonDiscarded as exc:
                        discarded.append((region, cultivar, int(season), exc.reason))
        return Dataset(self.kind, list(self.cultivars), self.features, self.train_region,
                       self.window, records, discarded, dict(self.truth))

    def write(self, out_dir, weather: dict[str, pd.DataFrame], extra: dict | None = None) -> Path:
        """Write weather, observation CSVs, true parameters and the manifest."""
        out = Path(out_dir)
        (out / "weather").mkdir(parents=True, exist_ok=True)
        regions = {}
        for region in sorted(self.observations):
            write_weather_csv(weather[region], out / "weather" / f"{region}.csv")
            (out / "observations" / region).mkdir(parents=True, exist_ok=True)
            files = {}
            for cultivar, df in sorted(self.observations[region].items()):
                rel = f"observations/{region}/{cultivar}.csv"
                write_observations(df, out / rel)
                files[cultivar] = rel
            regions[region] = {"weather": f"weather/{region}.csv", "observations": files}
        space = bp.SPACES[self.model]
        (out / "truth.json").write_text(json.dumps(
            {"model": self.model, "names": space.names, "parameters": self.truth},
            indent=2, sort_keys=True) + "\n")
        manifest = {
            "kind": self.kind, "model": self.model, "features": list(self.features),
            "window": list(self.window), "train_region": self.train_region,
            "cultivars": self.cultivars, "regions": regions, "truth": "truth.json",
        }
        if extra:
            manifest.update(extra)
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def generate_synthetic(model: str, weather: dict[str, pd.DataFrame], n_cultivars: int,
                       seasons_per_cultivar=(6, 15), mask_rate: float = 0.0, seed: int = 0,
                       train_region: str | None = None, true_params: dict | None = None,
                       features=SYNTHETIC_FEATURES, max_draws: int = 500) -> SyntheticData:
    """Roll stationary per-cultivar parameters over each region's weather.

    Every cultivar gets the same season years in every region.  Phenology
    parameters are redrawn until every training-region season reaches
    veraison; other regions keep whatever onsets the model reaches.
    """
    if model not in bp.SPACES:
        raise ValueError(f"unknown model {model!r}")
    kind = MODEL_KIND[model]
    space = bp.SPACES[model]
    window = WINDOWS[kind]
    features = tuple(features)
    train_region = train_region or sorted(weather)[0]
    rng = np.random.default_rng(seed)
    years = available_seasons(weather, window)
    lo, hi = (seasons_per_cultivar, seasons_per_cultivar) if np.isscalar(seasons_per_cultivar) \
        else seasons_per_cultivar
    if len(years) < hi:
        raise ValueError(f"weather covers {len(years)} seasons, need {hi}")

    cultivars = [f"C{i:02d}" for i in range(n_cultivars)]
    truth: dict[str, list[float]] = {}
    observations: dict[str, dict[str, pd.DataFrame]] = {r: {} for r in weather}
    for cultivar in cultivars:
        n = int(rng.integers(lo, hi + 1))
        seasons = sorted(rng.choice(years, size=n, replace=False).tolist())
        windows = {r: {s: _clean_window(weather[r], s, window, features) for s in seasons}
                   for r in weather}
        if true_params and cultivar in true_params:
            params = np.asarray(true_params[cultivar], dtype=np.float64)
        else:
            home = [w for w in windows[train_region].values() if w is not None]
            for _ in range(max_draws):
                params = sample_true_parameters(space, rng)
                if model != "gdd" or _reaches_veraison(params, home):
                    break
            else:
                raise RuntimeError(f"no parameter draw for {cultivar} reaches veraison")
        if not space.contains(params):
            raise ValueError(f"true parameters for {cultivar} fall outside the parameter space")
        truth[cultivar] = params.tolist()
        for region in sorted(weather):
            rows = []
            for season in seasons:
                w = windows[region][season]
                if w is None:
                    continue
                pred = bp.run_season(model, params, w.column(TEMP_COLUMN))
                start = pd.Timestamp(w.dates[0])
                if model == "gdd":
                    for name, day in zip(STAGE_NAMES, pred.onsets):
                        if day is not None:
                            rows.append((cultivar, season, start + pd.Timedelta(days=day), name))
                else:
                    keep = mask_random(w.n_days, mask_rate, rng)
                    for day in np.flatnonzero(keep):
                        rows.append((cultivar, season, start + pd.Timedelta(days=int(day)),
                                     float(pred.state.value[day])))
            cols = ["cultivar", "season", "date", "stage" if kind == "phenology" else "lte50"]
            observations[region][cultivar] = pd.DataFrame(rows, columns=cols)
    return SyntheticData(kind, features, window, train_region, cultivars, truth, observations)
