"""Synthetic station fields with known structure, used by tests and demos."""
from __future__ import annotations

import numpy as np
import pandas as pd

from .dataio import DataSchema, ObservationTable, table_from_frame


def grid_coords(side: int = 3) -> np.ndarray:
    """``side x side`` station grid spanning the unit square."""
    g = np.linspace(0.0, 1.0, side)
    lat, lon = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([lat.ravel(), lon.ravel()])


def field_mean(t, lat, lon):
    t = np.asarray(t, dtype=float)
    return 10.0 + 3.0 * np.sin(2 * np.pi * t / 24) + 2.0 * np.sin(2 * np.pi * t / 168) + 4.0 * lat * lon


def synthetic_frame(steps: int = 720, side: int = 3, noise: float = 0.5, seed: int = 0,
                    start: str = "2024-01-01T00:00:00", covariates: int = 0) -> pd.DataFrame:
    """Long-format frame of ``y = 10 + 3 sin(2pi t/24) + 2 sin(2pi t/168) + 4 lat lon + eps``."""
    rng = np.random.default_rng(seed)
    coords = grid_coords(side)
    n = len(coords)
    t = np.repeat(np.arange(steps), n)
    st = np.tile(np.arange(n), steps)
    lat, lon = coords[st, 0], coords[st, 1]
    y = field_mean(t, lat, lon) + noise * rng.standard_normal(len(t))
    stamps = pd.Timestamp(start) + pd.to_timedelta(t, unit="h")
    df = pd.DataFrame({
        "timestamp": stamps.strftime("%Y-%m-%dT%H:%M:%S"),
        "station_id": [f"S{i:02d}" for i in st],
        "lat": lat,
        "lon": lon,
        "target": y,
    })
    for c in range(covariates):
        df[f"z{c}"] = rng.standard_normal(len(t))
    return df


def synthetic_table(steps: int = 720, side: int = 3, noise: float = 0.5, seed: int = 0, covariates: int = 0):
    df = synthetic_frame(steps, side, noise, seed, covariates=covariates)
    schema = DataSchema(covariates=tuple(f"z{c}" for c in range(covariates)))
    return table_from_frame(df, schema)
