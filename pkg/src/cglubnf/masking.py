"""Missing-data simulators and site-based cross-validation splits.

Every simulator removes *targets only* from cells that are currently
observed.  Rates are measured against the table's observed count ``eta``;
structured patterns add whole units (site-days, instants, network days)
until the removed count first reaches ``floor(rate * eta)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .dataio import ObservationTable, StationSet

PATTERNS = ("random", "node", "timestamp", "block")
MAX_RATE = 0.8
MONTH_STEPS = 30 * 24


class MaskError(ValueError):
    pass


class UnreachableRateError(MaskError):
    def __init__(self, pattern, requested, max_rate):
        super().__init__(
            f"{pattern} pattern cannot reach rate {requested:.3f}; max achievable is {max_rate:.4f}"
        )
        self.max_rate = max_rate


@dataclass(frozen=True)
class MaskPlan:
    pattern: str
    rate_requested: float
    rate_realized: float
    seed: int
    removed: Tuple[Tuple[int, str], ...]  # (time_index, station_id), sorted

    def to_json(self) -> str:
        return json.dumps(
            {
                "pattern": self.pattern,
                "rate_requested": self.rate_requested,
                "rate_realized": self.rate_realized,
                "seed": self.seed,
                "removed": [[int(t), s] for t, s in self.removed],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        d = json.loads(text)
        return cls(
            d["pattern"], float(d["rate_requested"]), float(d["rate_realized"]), int(d["seed"]),
            tuple((int(t), str(s)) for t, s in d["removed"]),
        )


def _target_count(rate: float, eta: int) -> int:
    # Guard against 0.3 * 1000 == 299.99999999999997.
    return int(math.floor(rate * eta + 1e-9))


def _check_rate(rate: float) -> None:
    if not (0.0 <= rate <= MAX_RATE):
        raise MaskError(f"rate must lie in [0, {MAX_RATE}], got {rate}")


def _require_hourly(table: ObservationTable, pattern: str) -> None:
    if table.frequency != "hourly":
        raise MaskError(f"{pattern} pattern needs hourly data, got {table.frequency}")


def _plan(table, pattern, rate, seed, rows) -> MaskPlan:
    tidx = table.time_index()
    ids = table.stations.ids
    removed = sorted((int(tidx[r]), ids[table.station[r]]) for r in rows)
    eta = table.eta
    realized = len(removed) / eta if eta else 0.0
    return MaskPlan(pattern, float(rate), realized, int(seed), tuple(removed))


def _grow_units(table, pattern, rate, seed, unit_keys) -> MaskPlan:
    """Remove whole units (grouped observed rows) in random order until the target count."""
    _check_rate(rate)
    obs_rows = np.flatnonzero(table.observed)
    eta = len(obs_rows)
    goal = _target_count(rate, eta)
    if goal == 0:
        return _plan(table, pattern, rate, seed, [])
    keys = unit_keys[obs_rows]
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.random.default_rng(seed).permutation(len(uniq))
    members = [[] for _ in range(len(uniq))]
    for row, u in zip(obs_rows, inverse):
        members[u].append(row)
    chosen, count = [], 0
    for u in order:
        chosen.extend(members[u])
        count += len(members[u])
        if count >= goal:
            return _plan(table, pattern, rate, seed, chosen)
    raise UnreachableRateError(pattern, rate, count / eta)


def apply_random(table: ObservationTable, rate: float, seed: int) -> MaskPlan:
    _check_rate(rate)
    obs_rows = np.flatnonzero(table.observed)
    k = _target_count(rate, len(obs_rows))
    rows = np.random.default_rng(seed).choice(obs_rows, size=k, replace=False) if k else []
    return _plan(table, "random", rate, seed, rows)


def _days(table: ObservationTable) -> np.ndarray:
    return table.times.astype("datetime64[D]").astype(np.int64)


def apply_node(table: ObservationTable, rate: float, seed: int) -> MaskPlan:
    """Station-day outages: each unit is one site's 24 hourly cells of a day."""
    _require_hourly(table, "node")
    keys = np.column_stack([table.station, _days(table)])
    return _grow_units(table, "node", rate, seed, keys)


def apply_timestamp(table: ObservationTable, rate: float, seed: int) -> MaskPlan:
    """Network-wide instants: each unit is one timestamp at every station."""
    _require_hourly(table, "timestamp")
    keys = table.times.astype(np.int64)[:, None]
    return _grow_units(table, "timestamp", rate, seed, keys)


def apply_block(table: ObservationTable, rate: float, seed: int) -> MaskPlan:
    """Network-wide day rectangles: all stations lose hours 0-23 of a day."""
    _require_hourly(table, "block")
    keys = _days(table)[:, None]
    return _grow_units(table, "block", rate, seed, keys)


SIMULATORS = {
    "random": apply_random,
    "node": apply_node,
    "timestamp": apply_timestamp,
    "block": apply_block,
}


def simulate(table: ObservationTable, pattern: str, rate: float, seed: int) -> MaskPlan:
    try:
        fn = SIMULATORS[pattern]
    except KeyError:
        raise MaskError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}") from None
    return fn(table, rate, seed)


def removed_rows(table: ObservationTable, plan: MaskPlan) -> np.ndarray:
    tidx = table.time_index()
    lookup = {(int(t), table.stations.ids[s]): i for i, (t, s) in enumerate(zip(tidx, table.station))}
    try:
        return np.array(sorted(lookup[(t, s)] for t, s in plan.removed), dtype=np.int64)
    except KeyError as exc:
        raise MaskError(f"plan cell {exc.args[0]} not in table") from None


def apply_plan(table: ObservationTable, plan: MaskPlan) -> ObservationTable:
    """Return a copy whose removed cells have absent targets; covariates untouched."""
    target = table.target.copy()
    target[removed_rows(table, plan)] = np.nan
    return table.with_targets(target)


# --------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitPlan:
    folds: Tuple[Tuple[str, ...], ...]  # station ids per fold
    test_window: int
    last_index: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_of(self) -> dict:
        return {s: f for f, ids in enumerate(self.folds) for s in ids}

    def test_mask(self, table: ObservationTable, fold: int) -> np.ndarray:
        """Rows in fold ``fold``'s held-out stations during the final window."""
        ids = set(self.folds[fold])
        held = np.array([table.stations.ids[s] in ids for s in table.station])
        return held & (table.time_index() > self.last_index - self.test_window)

    def train_test(self, table: ObservationTable, fold: int):
        test = self.test_mask(table, fold)
        train = table.target.copy()
        train[test] = np.nan
        return table.with_targets(train), test


def make_cv_splits(stations: StationSet, table: ObservationTable, k: int = 5, seed: int = 0,
                   test_window: int = MONTH_STEPS) -> SplitPlan:
    """Shuffle stations into ``k`` near-equal folds; each fold tests on the final window."""
    if len(stations) < k:
        raise MaskError(f"need at least {k} stations for {k}-fold CV, have {len(stations)}")
    tidx = table.time_index()
    last = int(tidx.max())
    if last + 1 < test_window:
        raise MaskError(f"time span of {last + 1} steps is shorter than the test window ({test_window})")
    perm = np.random.default_rng(seed).permutation(len(stations))
    folds = tuple(tuple(stations.ids[i] for i in sorted(part)) for part in np.array_split(perm, k))
    return SplitPlan(folds, int(test_window), last)


def tail_split(stations: StationSet, table: ObservationTable, test_window: int) -> SplitPlan:
    """A single fold holding out the final window at every station."""
    last = int(table.time_index().max())
    if last + 1 <= test_window:
        raise MaskError("test window covers the whole series")
    return SplitPlan((tuple(stations.ids),), int(test_window), last)


def run_lengths(sorted_values: List[int]) -> List[int]:
    """Lengths of maximal runs of consecutive integers."""
    runs, prev, length = [], None, 0
    for v in sorted_values:
        if prev is not None and v == prev + 1:
            length += 1
        else:
            if length:
                runs.append(length)
            length = 1
        prev = v
    if length:
        runs.append(length)
    return runs
