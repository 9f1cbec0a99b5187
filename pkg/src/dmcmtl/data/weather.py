"""Daily weather tables: CSV I/O, season windows and a stochastic generator.

Weather CSV layout is ``date,region,<feature columns...>`` with ISO dates and
empty cells for missing values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np
import pandas as pd

SYNTHETIC_FEATURES = ("DAYL", "TMIN", "TMAX", "TEMP", "IRRAD", "RAIN", "E0", "ET0", "WIND")
SYNTHETIC_UNITS = ("h", "C", "C", "C", "MJ/m2/d", "mm", "mm", "mm", "m/s")
TEMP_COLUMN = "TEMP"

# (start "MM-DD", end "MM-DD"); an end before the start wraps into the next year
WINDOWS = {
    "phenology": ("01-01", "09-07"),
    "cold_hardiness": ("09-07", "05-15"),
}


@dataclass
class WeatherSeries:
    """One season of daily weather; ``NaN`` marks a missing value."""
    season: int
    region: str
    dates: np.ndarray
    values: np.ndarray
    names: tuple[str, ...]
    units: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.dates), len(self.names)):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"{len(self.dates)} days x {len(self.names)} features")

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    @property
    def day_of_year(self) -> np.ndarray:
        return pd.DatetimeIndex(self.dates).dayofyear.to_numpy()

    def replace(self, values: np.ndarray) -> "WeatherSeries":
        return WeatherSeries(self.season, self.region, self.dates, values, self.names, self.units)


def window_dates(season: int, window: tuple[str, str]) -> pd.DatetimeIndex:
    start, end = window
    t0 = pd.Timestamp(f"{season}-{start}")
    t1 = pd.Timestamp(f"{season}-{end}")
    if t1 < t0:
        t1 = pd.Timestamp(f"{season + 1}-{end}")
    return pd.date_range(t0, t1, freq="D")


def read_weather_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, parse_dates=["date"], float_precision="round_trip")
    if list(df.columns[:2]) != ["date", "region"]:
        raise ValueError(f"{path}: header must start with date,region")
    return df.set_index("date").sort_index()


def write_weather_csv(df: pd.DataFrame, path) -> None:
    out = df.reset_index()
    out["date"] = out["date"].dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False, float_format="%.6f", na_rep="")


def season_weather(table: pd.DataFrame, season: int, window: tuple[str, str],
                   features=None) -> WeatherSeries:
    """Cut one season window out of a weather table.

    Days absent from the table come back as all-missing rows; raises
    ``ValueError`` when the table does not cover the window at all.
    """
    dates = window_dates(season, window)
    if dates[0] < table.index[0] or dates[-1] > table.index[-1]:
        raise ValueError(f"weather table does not cover {dates[0].date()}..{dates[-1].date()}")
    features = tuple(features) if features is not None else tuple(c for c in table.columns if c != "region")
    sub = table.reindex(dates)
    region = str(table["region"].iloc[0])
    return WeatherSeries(season, region, dates.to_numpy(), sub[list(features)].to_numpy(dtype=float),
                         features)


# ---------------------------------------------------------------- generator

@dataclass(frozen=True)
class RegionClimate:
    latitude: float
    t_mean: float
    t_amp: float
    diurnal_range: float
    noise_sd: float = 3.0
    persistence: float = 0.75
    year_sd: float = 1.0
    rain_prob: float = 0.3
    rain_mean: float = 4.0
    wind_mean: float = 3.0


# loosely shaped on the four growing regions; only relative differences matter
CLIMATES = {
    "WA": RegionClimate(latitude=46.2, t_mean=12.5, t_amp=12.5, diurnal_range=15.0, rain_prob=0.15),
    "VT": RegionClimate(latitude=44.5, t_mean=8.0, t_amp=14.0, diurnal_range=11.0, rain_prob=0.4),
    "CA": RegionClimate(latitude=38.3, t_mean=15.5, t_amp=6.5, diurnal_range=14.0, rain_prob=0.2),
    "OR": RegionClimate(latitude=45.0, t_mean=12.0, t_amp=8.0, diurnal_range=11.0, rain_prob=0.45),
}


def day_length(doy: np.ndarray, latitude: float) -> np.ndarray:
    """Astronomical day length in hours (CBM formulation)."""
    theta = 0.2163108 + 2 * np.arctan(0.9671396 * np.tan(0.00860 * (doy - 186)))
    phi = np.arcsin(0.39795 * np.cos(theta))
    lat = np.deg2rad(latitude)
    x = (np.sin(np.deg2rad(0.8333)) + np.sin(lat) * np.sin(phi)) / (np.cos(lat) * np.cos(phi))
    return 24.0 - (24.0 / np.pi) * np.arccos(np.clip(x, -1.0, 1.0))


def generate_weather(region: str, first_year: int, last_year: int, seed: int,
                     climate: RegionClimate | None = None, missing_rate: float = 0.0) -> pd.DataFrame:
    """Synthetic daily weather for ``first_year``-01-01 .. ``last_year``-12-31."""
    c = climate or CLIMATES[region]
    rng = np.random.default_rng(seed)
    dates = pd.date_range(f"{first_year}-01-01", f"{last_year}-12-31", freq="D")
    n = len(dates)
    doy = dates.dayofyear.to_numpy().astype(float)
    years = dates.year.to_numpy()

    year_offset = {y: rng.normal(0.0, c.year_sd) for y in range(first_year, last_year + 1)}
    anomaly = np.empty(n)
    a = 0.0
    shocks = rng.normal(0.0, c.noise_sd * np.sqrt(1 - c.persistence ** 2), n)
    for i in range(n):
        a = c.persistence * a + shocks[i]
        anomaly[i] = a
    temp = (c.t_mean + c.t_amp * np.cos(2 * np.pi * (doy - 197) / 365.25)
            + np.array([year_offset[y] for y in years]) + anomaly)

    wet = rng.random(n) < c.rain_prob
    rain = np.where(wet, rng.exponential(c.rain_mean, n), 0.0)
    dtr = np.clip(c.diurnal_range * np.where(wet, 0.6, 1.0) + rng.normal(0, 1.5, n), 2.0, None)
    tmin = temp - dtr / 2
    tmax = temp + dtr / 2
    dayl = day_length(doy, c.latitude)
    clearness = np.clip(np.where(wet, 0.35, 0.7) + rng.normal(0, 0.08, n), 0.1, 0.85)
    irrad = 1.6 * dayl * clearness * (0.6 + 0.4 * np.sin(np.pi * dayl / 24))
    # Hargreaves-style reference evapotranspiration
    et0 = np.clip(0.0023 * (irrad / 2.45) * (temp + 17.8) * np.sqrt(dtr), 0.0, None)
    e0 = 1.25 * et0
    wind = rng.lognormal(np.log(c.wind_mean), 0.35, n)

    df = pd.DataFrame({"region": region, "DAYL": dayl, "TMIN": tmin, "TMAX": tmax, "TEMP": temp,
                       "IRRAD": irrad, "RAIN": rain, "E0": e0, "ET0": et0, "WIND": wind},
                      index=pd.DatetimeIndex(dates, name="date"))
    if missing_rate > 0:
        feats = list(SYNTHETIC_FEATURES)
        holes = rng.random((n, len(feats))) < missing_rate
        df[feats] = df[feats].mask(holes)
    # stored at CSV precision so a write/read round trip is exact
    for col in SYNTHETIC_FEATURES:
        df[col] = _csv_exact(df[col].to_numpy())
    return df


def _csv_exact(x: np.ndarray) -> np.ndarray:
    out = np.full(x.shape, np.nan)
    ok = ~np.isnan(x)
    out[ok] = [float(s) for s in np.char.mod("%.6f", x[ok])]
    return out
