"""Station observation tables, preprocessing, and the monitoring graph."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FREQUENCIES = {"hourly": 3600, "daily": 86400, "30min": 1800, "15min": 900}
BASE_COLUMNS = ("timestamp", "station_id", "lat", "lon", "target")


class DataError(ValueError):
    """Base class for ingestion and preprocessing failures."""


class MissingColumnError(DataError):
    pass


class TimestampError(DataError):
    """Unparsable or misaligned timestamp."""


class DuplicateKeyError(DataError):
    pass


class NegativeIndexError(DataError):
    """A timestamp falls before the reference instant."""


@dataclass(frozen=True)
class DataSchema:
    covariates: tuple = ()
    frequency: str = "hourly"
    strict: bool = False

    @property
    def step_seconds(self) -> int:
        try:
            return FREQUENCIES[self.frequency]
        except KeyError:
            raise DataError(f"unknown frequency {self.frequency!r}; known: {sorted(FREQUENCIES)}") from None


@dataclass(frozen=True)
class StationSet:
    ids: tuple
    coords: np.ndarray  # (N, 2) as (lat, lon)

    def __post_init__(self):
        if len(self.ids) == 0:
            raise DataError("station set is empty")
        if len(set(self.ids)) != len(self.ids):
            raise DuplicateKeyError("station ids must be unique")
        if self.coords.shape != (len(self.ids), 2) or not np.all(np.isfinite(self.coords)):
            raise DataError("station coordinates must be finite (lat, lon) pairs")

    def __len__(self):
        return len(self.ids)

    def index(self) -> Dict[str, int]:
        return {sid: i for i, sid in enumerate(self.ids)}


@dataclass
class ObservationTable:
    """Long-format records; absent targets are NaN and excluded from O."""

    times: np.ndarray  # datetime64[s]
    station: np.ndarray  # int index into ``stations``
    target: np.ndarray  # float, NaN where absent
    covariates: np.ndarray  # (n, C)
    stations: StationSet
    covariate_names: tuple = ()
    frequency: str = "hourly"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype="datetime64[s]")
        self.station = np.asarray(self.station, dtype=np.int64)
        self.target = np.asarray(self.target, dtype=np.float64)
        cov = np.asarray(self.covariates, dtype=np.float64)
        self.covariates = cov.reshape(len(self.target), -1) if cov.size else np.zeros((len(self.target), 0))

    def __len__(self):
        return len(self.target)

    @property
    def step_seconds(self) -> int:
        return FREQUENCIES[self.frequency]

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.target)

    @property
    def eta(self) -> int:
        return int(self.observed.sum())

    @property
    def t0(self) -> np.datetime64:
        return self.times.min()

    def time_index(self, t0: Optional[np.datetime64] = None) -> np.ndarray:
        return discretize_time(self.times, self.t0 if t0 is None else t0, self.step_seconds)

    def subset(self, rows) -> "ObservationTable":
        rows = np.asarray(rows)
        return replace(
            self,
            times=self.times[rows],
            station=self.station[rows],
            target=self.target[rows],
            covariates=self.covariates[rows],
        )

    def with_targets(self, target: np.ndarray) -> "ObservationTable":
        return replace(self, target=np.asarray(target, dtype=np.float64).copy())

    def select_covariates(self, names: Sequence[str]) -> "ObservationTable":
        cols = []
        for n in names:
            if n not in self.covariate_names:
                raise MissingColumnError(f"covariate {n!r} not in table {self.covariate_names}")
            cols.append(self.covariate_names.index(n))
        return replace(self, covariates=self.covariates[:, cols], covariate_names=tuple(names))


# ------------------------------------------------------------------ loading

def load_csv(path, schema: DataSchema = DataSchema()):
    """Read a station CSV into ``(ObservationTable, StationSet)``.

    Rows with malformed coordinates are dropped (logged) unless
    ``schema.strict``; an unparsable timestamp is always an error.
    """
    try:
        df = pd.read_csv(path, dtype={"station_id": str}, keep_default_na=False, na_values=[""])
    except FileNotFoundError:
        raise
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    wanted = list(BASE_COLUMNS) + list(schema.covariates)
    missing = [c for c in wanted if c not in df.columns]
    if missing:
        raise MissingColumnError(f"missing column(s) {missing} in {path}")
    return table_from_frame(df, schema)


def table_from_frame(df: pd.DataFrame, schema: DataSchema = DataSchema()):
    step = schema.step_seconds
    times = pd.to_datetime(df["timestamp"], errors="coerce", utc=True)
    bad_time = times.isna().to_numpy()
    if bad_time.any():
        first = df["timestamp"].iloc[int(np.argmax(bad_time))]
        raise TimestampError(f"unparsable timestamp {first!r}")
    lat = pd.to_numeric(df["lat"], errors="coerce").to_numpy(dtype=float)
    lon = pd.to_numeric(df["lon"], errors="coerce").to_numpy(dtype=float)
    bad_coord = ~(np.isfinite(lat) & np.isfinite(lon))
    if bad_coord.any():
        if schema.strict:
            raise DataError(f"{int(bad_coord.sum())} row(s) with malformed coordinates")
        logger.warning("dropping %d row(s) with malformed coordinates", int(bad_coord.sum()))
    keep = ~bad_coord
    df = df.loc[keep].reset_index(drop=True)
    lat, lon = lat[keep], lon[keep]
    ts = times[keep].dt.tz_localize(None).to_numpy().astype("datetime64[s]")

    target = pd.to_numeric(df["target"], errors="coerce").to_numpy(dtype=float)
    cov = np.column_stack(
        [pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float) for c in schema.covariates]
    ) if schema.covariates else np.zeros((len(df), 0))

    secs = ts.astype(np.int64)
    if np.any(secs % step):
        bad = ts[np.argmax(secs % step != 0)]
        raise TimestampError(f"timestamp {bad} not aligned to {schema.frequency} frequency")

    sid = df["station_id"].astype(str).to_numpy()
    ids, first = np.unique(sid, return_index=True)
    order = np.argsort(first)
    ids, first = ids[order], first[order]
    coords = np.column_stack([lat[first], lon[first]])
    stations = StationSet(tuple(ids.tolist()), coords)
    lookup = stations.index()
    station = np.array([lookup[s] for s in sid], dtype=np.int64)
    if np.any(np.abs(coords[station] - np.column_stack([lat, lon])) > 1e-9):
        logger.warning("inconsistent coordinates for a station; using its first row")

    key = secs * len(ids) + station
    uniq, counts = np.unique(key, return_counts=True)
    if np.any(counts > 1):
        k = uniq[np.argmax(counts > 1)]
        raise DuplicateKeyError(
            f"duplicate record for station {ids[k % len(ids)]!r} at {np.datetime64(int(k // len(ids)), 's')}"
        )
    table = ObservationTable(ts, station, target, cov, stations, tuple(schema.covariates), schema.frequency)
    return table, stations


def write_csv(path, table: ObservationTable) -> None:
    """Write a table back to the CSV interchange schema."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(BASE_COLUMNS) + list(table.covariate_names))
        for i in range(len(table)):
            s = table.station[i]
            lat, lon = table.stations.coords[s]
            y = table.target[i]
            row = [
                str(table.times[i]),
                table.stations.ids[s],
                repr(float(lat)),
                repr(float(lon)),
                "" if np.isnan(y) else repr(float(y)),
            ]
            row += ["" if np.isnan(v) else repr(float(v)) for v in table.covariates[i]]
            w.writerow(row)


# ------------------------------------------------------------ preprocessing

def discretize_time(times, t0, step_seconds: int = 3600) -> np.ndarray:
    """Integer offsets ``index(t) - index(t0)`` at the given sampling step."""
    times = np.asarray(times, dtype="datetime64[s]")
    delta = (times - np.datetime64(t0, "s")).astype(np.int64)
    if np.any(delta % step_seconds):
        raise TimestampError("timestamp not aligned to sampling frequency")
    idx = delta // step_seconds
    if idx.size and idx.min() < 0:
        raise NegativeIndexError(f"timestamp before reference {np.datetime64(t0, 's')}")
    return idx


@dataclass(frozen=True)
class ZScore:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def invert(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.std + self.mean


def zscore_fit(columns) -> ZScore:
    """Per-column mean and population std; constant columns get std 1."""
    x = np.asarray(columns, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise DataError("cannot fit z-score on an empty column")
    finite = np.isfinite(x)
    if not np.all(finite.any(axis=0)):
        raise DataError("z-score fit needs at least one finite value per column")
    mean = np.nanmean(x, axis=0)
    std = np.nanstd(x, axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return ZScore(mean, std)


def zscore_apply(values, stats: ZScore) -> np.ndarray:
    return stats.apply(values)


@dataclass
class PreprocessStats:
    """Normalization fitted on training rows only."""

    t0: np.datetime64
    step_seconds: int
    t_max: float
    target_mean: float
    target_std: float
    coord_mean: np.ndarray
    coord_std: np.ndarray
    cov_mean: np.ndarray
    cov_std: np.ndarray
    covariate_names: tuple = ()

    @classmethod
    def fit(cls, table: ObservationTable) -> "PreprocessStats":
        obs = table.observed
        if not obs.any():
            raise DataError("no observed targets to fit preprocessing on")
        t0 = table.times[obs].min()
        tidx = discretize_time(table.times[obs], t0, table.step_seconds)
        y = zscore_fit(table.target[obs])
        c = zscore_fit(table.stations.coords[table.station[obs]])
        if table.covariates.shape[1]:
            z = zscore_fit(table.covariates[obs])
            cov_mean, cov_std = z.mean, z.std
        else:
            cov_mean, cov_std = np.zeros(0), np.ones(0)
        return cls(
            t0=t0,
            step_seconds=table.step_seconds,
            t_max=float(max(tidx.max(), 1)),
            target_mean=float(y.mean[0]),
            target_std=float(y.std[0]),
            coord_mean=c.mean,
            coord_std=c.std,
            cov_mean=cov_mean,
            cov_std=cov_std,
            covariate_names=tuple(table.covariate_names),
        )

    def normalize_target(self, y):
        return (np.asarray(y, dtype=float) - self.target_mean) / self.target_std

    def denormalize_target(self, y):
        return np.asarray(y, dtype=float) * self.target_std + self.target_mean

    def to_dict(self) -> dict:
        return {
            "t0": str(self.t0),
            "step_seconds": self.step_seconds,
            "t_max": self.t_max,
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "coord_mean": self.coord_mean.tolist(),
            "coord_std": self.coord_std.tolist(),
            "cov_mean": self.cov_mean.tolist(),
            "cov_std": self.cov_std.tolist(),
            "covariate_names": list(self.covariate_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessStats":
        return cls(
            t0=np.datetime64(d["t0"], "s"),
            step_seconds=int(d["step_seconds"]),
            t_max=float(d["t_max"]),
            target_mean=float(d["target_mean"]),
            target_std=float(d["target_std"]),
            coord_mean=np.asarray(d["coord_mean"], dtype=float),
            coord_std=np.asarray(d["coord_std"], dtype=float),
            cov_mean=np.asarray(d["cov_mean"], dtype=float),
            cov_std=np.asarray(d["cov_std"], dtype=float),
            covariate_names=tuple(d["covariate_names"]),
        )


# -------------------------------------------------------------------- graph

@dataclass(frozen=True)
class MonitoringGraph:
    adjacency: np.ndarray
    sigma_d: float


def pairwise_distances(coords, haversine: bool = False) -> np.ndarray:
    c = np.asarray(coords, dtype=float)
    if not haversine:
        diff = c[:, None, :] - c[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))
    lat, lon = np.radians(c[:, 0]), np.radians(c[:, 1])
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    a = np.sin(dlat / 2) ** 2 + np.cos(lat[:, None]) * np.cos(lat[None, :]) * np.sin(dlon / 2) ** 2
    return 2 * 6371.0 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def default_sigma(dist: np.ndarray) -> float:
    """Median off-diagonal distance, or 1 if every station coincides."""
    n = dist.shape[0]
    if n < 2:
        return 1.0
    off = dist[np.triu_indices(n, k=1)]
    med = float(np.median(off))
    return med if med > 0 else 1.0


def build_adjacency(stations: StationSet, sigma_d: Optional[float] = None, haversine: bool = False) -> MonitoringGraph:
    """Gaussian-kernel adjacency ``exp(-d^2 / sigma_d^2)`` with a zero diagonal."""
    dist = pairwise_distances(stations.coords, haversine)
    if sigma_d is None:
        sigma_d = default_sigma(dist)
    if sigma_d <= 0:
        raise ValueError("sigma_d must be positive")
    A = np.exp(-(dist ** 2) / sigma_d ** 2)
    np.fill_diagonal(A, 0.0)
    n = len(stations)
    if n > 1 and np.any(dist[~np.eye(n, dtype=bool)] == 0):
        logger.info("coincident stations present; their adjacency is 1")
    return MonitoringGraph(A, float(sigma_d))


# ------------------------------------------------------------------ samples

@dataclass
class SampleMatrix:
    """One row per observed cell.

    ``features`` holds ``[t'/t_max, lat_z, lon_z, covariates_z...]``; the raw
    integer ``t_index`` rides alongside for the harmonic features.
    """

    t_index: np.ndarray
    station: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    rows: np.ndarray  # back-reference into the source table
    feature_names: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.t_index)

    @property
    def d_prepro(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "SampleMatrix":
        idx = np.asarray(idx)
        return SampleMatrix(
            self.t_index[idx], self.station[idx], self.features[idx], self.labels[idx], self.rows[idx],
            list(self.feature_names),
        )


def build_features(t_index, coords, covariates, stats: PreprocessStats) -> np.ndarray:
    cov = np.asarray(covariates, dtype=float).reshape(len(t_index), -1)
    if cov.shape[1] != stats.cov_mean.shape[0]:
        raise ValueError(f"table has {cov.shape[1]} covariates, stats expect {stats.cov_mean.shape[0]}")
    t_norm = np.asarray(t_index, dtype=float)[:, None] / stats.t_max
    s = (np.asarray(coords, dtype=float) - stats.coord_mean) / stats.coord_std
    z = (cov - stats.cov_mean) / stats.cov_std
    # Missing covariate values sit at the training mean.
    z = np.where(np.isfinite(z), z, 0.0)
    return np.hstack([t_norm, s, z])


def assemble_samples(table: ObservationTable, stats: PreprocessStats, include_unobserved: bool = False) -> SampleMatrix:
    """Stack observed cells into model-ready rows (labels z-scored)."""
    rows = np.arange(len(table)) if include_unobserved else np.flatnonzero(table.observed)
    t_index = discretize_time(table.times[rows], stats.t0, stats.step_seconds)
    coords = table.stations.coords[table.station[rows]]
    feats = build_features(t_index, coords, table.covariates[rows], stats)
    names = ["t_trend", "lat", "lon"] + [f"cov:{c}" for c in table.covariate_names]
    return SampleMatrix(
        t_index=t_index,
        station=table.station[rows].copy(),
        features=feats,
        labels=stats.normalize_target(table.target[rows]),
        rows=rows,
        feature_names=names,
    )
