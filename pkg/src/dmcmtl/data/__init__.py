"""Weather ingestion, cleaning, labels, splits and the synthetic benchmark."""
from .dataset import (Dataset, DatasetSplit, SeasonRecord, fit_normalizer, load_dataset,
                      make_split, read_observations, write_observations)
from .pipeline import (DataError, Normalizer, SeasonDiscarded, clean_season, date_embedding,
                       fill_phenology_labels, mask_cold_hardiness, mask_random)
from .synthetic import SyntheticData, generate_synthetic, sample_true_parameters
from .weather import (CLIMATES, SYNTHETIC_FEATURES, WINDOWS, WeatherSeries, generate_weather,
                      read_weather_csv, season_weather, write_weather_csv)
