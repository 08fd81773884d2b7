"""Metrics, the historical-average baseline, and the experiment runner.

Evaluation only ever reads targets that were observed in the original
data *and* fall in a fold's test window; masked or originally missing
cells never contribute.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import masking
from .bayes import fit_ensemble, predict
from .config import ConfigError, RunConfig, _build, _to_plain
from .dataio import DataSchema, ObservationTable, load_csv
from .model import query_batch

logger = logging.getLogger(__name__)

METRICS = ("rmse", "mae", "r2", "smape", "aiw", "riwm")
MODEL_NAME = "CGLU-BNF"
BASELINE_NAME = "HA"


# ------------------------------------------------------------------ metrics

def metrics_point(y, y_hat) -> Dict[str, float]:
    """RMSE, MAE, R^2 and SMAPE (percent, ``2|e|/(|y|+|y_hat|)`` form).

    R^2 is NaN (with ``r2_defined`` False) when the targets are constant.
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError("y and y_hat must have equal length")
    if y.size == 0:
        raise ValueError("no targets to evaluate")
    resid = y - y_hat
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    denom = np.abs(y) + np.abs(y_hat)
    ratio = np.divide(2.0 * np.abs(resid), denom, out=np.zeros_like(denom), where=denom > 0)
    return {
        "rmse": float(np.sqrt(np.mean(resid ** 2))),
        "mae": float(np.mean(np.abs(resid))),
        "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan"),
        "r2_defined": ss_tot > 0,
        "smape": float(100.0 * np.mean(ratio)),
    }


def metrics_interval(lower, upper, y, eps: float = 1e-6) -> Dict[str, float]:
    """Average interval width and mean width relative to the target.

    Targets with ``|y| <= eps`` are left out of the relative mean and counted.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    y = np.asarray(y, dtype=float)
    width = upper - lower
    keep = np.abs(y) > eps
    return {
        "aiw": float(np.mean(width)) if width.size else 0.0,
        "riwm": float(np.mean(width[keep] / y[keep])) if keep.any() else 0.0,
        "riwm_excluded": int((~keep).sum()),
    }


# ---------------------------------------------------------------- baseline

class HABaseline:
    """Per-station hour-of-day mean; falls back to the station mean, then the global mean."""

    def __init__(self, table: ObservationTable):
        obs = table.observed
        if not obs.any():
            raise ValueError("historical average needs observed training targets")
        hours = _hour_of_day(table.times[obs])
        st = table.station[obs]
        y = table.target[obs]
        self.global_mean = float(y.mean())
        self.station_mean: Dict[int, float] = {}
        self.hourly: Dict[Tuple[int, int], float] = {}
        for s in np.unique(st):
            sel = st == s
            self.station_mean[int(s)] = float(y[sel].mean())
            for h in np.unique(hours[sel]):
                hs = sel & (hours == h)
                self.hourly[(int(s), int(h))] = float(y[hs].mean())

    def predict(self, times, station) -> np.ndarray:
        hours = _hour_of_day(np.asarray(times, dtype="datetime64[s]"))
        out = np.empty(len(hours))
        for i, (s, h) in enumerate(zip(np.asarray(station), hours)):
            key = (int(s), int(h))
            if key in self.hourly:
                out[i] = self.hourly[key]
            else:
                out[i] = self.station_mean.get(int(s), self.global_mean)
        return out


def ha_baseline(train_table: ObservationTable) -> HABaseline:
    return HABaseline(train_table)


def _hour_of_day(times) -> np.ndarray:
    secs = np.asarray(times, dtype="datetime64[s]").astype(np.int64)
    return (secs // 3600) % 24


# ------------------------------------------------------------------ reports

@dataclass
class MetricReport:
    pattern: str
    rate: float
    fold: int
    model: str
    rmse: float
    mae: float
    r2: float
    smape: float
    aiw: float
    riwm: float
    n: int
    runtime_s: Optional[float] = None

    def row(self) -> dict:
        return {
            "pattern": self.pattern,
            "rate": self.rate,
            "fold": self.fold,
            "model": self.model,
            "rmse": self.rmse,
            "mae": self.mae,
            "r2": None if np.isnan(self.r2) else self.r2,
            "smape": self.smape,
            "aiw": self.aiw,
            "riwm": self.riwm,
            "n": self.n,
            "runtime_s": self.runtime_s,
        }


@dataclass(frozen=True)
class SeedConfig:
    mask: int = 0
    split: int = 0


@dataclass(frozen=True)
class ExperimentSpec:
    data: str
    config: RunConfig
    patterns: Tuple[str, ...] = ("random",)
    rates: Tuple[float, ...] = (0.0,)
    split: str = "cv"  # "cv": k-fold over sites; "tail": all sites hold out the final window
    folds: int = 5
    max_folds: Optional[int] = None
    horizon: int = masking.MONTH_STEPS
    seeds: SeedConfig = field(default_factory=SeedConfig)
    covariates: Optional[Tuple[str, ...]] = None
    interval_level: Optional[float] = None
    record_runtime: bool = False

    def __post_init__(self):
        for p in self.patterns:
            if p not in masking.PATTERNS:
                raise ConfigError(f"patterns: unknown pattern {p!r}")
        for r in self.rates:
            if not 0.0 <= r <= masking.MAX_RATE:
                raise ConfigError(f"rates: {r} outside [0, {masking.MAX_RATE}]")
        if self.split not in ("cv", "tail"):
            raise ConfigError("split: must be 'cv' or 'tail'")
        if self.horizon < 1:
            raise ConfigError("horizon: must be >= 1 step")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[str] = None) -> "ExperimentSpec":
        spec = _build(cls, d, "")
        if base_dir and not os.path.isabs(spec.data):
            spec = _replace(spec, data=os.path.normpath(os.path.join(base_dir, spec.data)))
        return spec

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"spec is not valid JSON: {exc}") from exc
        return cls.from_dict(d, os.path.dirname(os.path.abspath(path)))

    def to_dict(self) -> dict:
        return _to_plain(self)

    @property
    def level(self) -> float:
        return self.config.interval_level if self.interval_level is None else self.interval_level

    def resolved_covariates(self) -> Tuple[str, ...]:
        return tuple(self.config.data.covariates if self.covariates is None else self.covariates)

    def fingerprint(self) -> str:
        d = self.to_dict()
        d["data"] = os.path.basename(self.data)
        with open(self.data, "rb") as fh:
            d["data_sha256"] = hashlib.sha256(fh.read()).hexdigest()
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _replace(spec, **kw):
    import dataclasses
    return dataclasses.replace(spec, **kw)


@dataclass
class CellResult:
    pattern: str
    rate: float
    fold: int
    reports: List[MetricReport]
    predictions: Dict[str, list]
    log: dict


def cell_seed(spec: ExperimentSpec, pattern: str, rate: float, fold: int) -> int:
    ss = np.random.SeedSequence([spec.seeds.mask, masking.PATTERNS.index(pattern), int(round(rate * 1000)), fold])
    return int(ss.generate_state(1)[0])


def load_spec_data(spec: ExperimentSpec):
    schema = DataSchema(covariates=spec.resolved_covariates(), frequency=spec.config.data.frequency,
                        strict=spec.config.data.strict)
    return load_csv(spec.data, schema)


def make_split(spec: ExperimentSpec, table: ObservationTable) -> masking.SplitPlan:
    if spec.split == "tail":
        return masking.tail_split(table.stations, table, spec.horizon)
    return masking.make_cv_splits(table.stations, table, spec.folds, spec.seeds.split, spec.horizon)


def run_cell(spec: ExperimentSpec, table: ObservationTable, split: masking.SplitPlan,
             pattern: str, rate: float, fold: int) -> CellResult:
    """Mask the fold's training data, fit, and score the held-out window."""
    t_start = time.perf_counter()
    try:
        train, test_rows = split.train_test(table, fold)
        seed = cell_seed(spec, pattern, rate, fold)
        plan = masking.simulate(train, pattern, rate, seed)
        masked = masking.apply_plan(train, plan)
        config = spec.config
        if spec.resolved_covariates() != tuple(config.data.covariates):
            config = _replace(config, data=_replace(config.data, covariates=spec.resolved_covariates()))
        ens = fit_ensemble(masked, config)
        eval_rows = np.flatnonzero(test_rows & table.observed)
        if eval_rows.size == 0:
            raise ValueError("fold has no observed test targets")
        batch = query_batch(ens.network, ens.stats, table.times[eval_rows], table.station[eval_rows],
                            table.covariates[eval_rows])
        mix = predict(ens, batch)
        y = table.target[eval_rows]
        y_hat = mix.mean()
        lower, upper = mix.interval(spec.level)
        ha = HABaseline(masked).predict(table.times[eval_rows], table.station[eval_rows])
    except Exception as exc:
        raise type(exc)(f"[pattern={pattern} rate={rate} fold={fold}] {exc}") from exc
    elapsed = time.perf_counter() - t_start if spec.record_runtime else None

    reports = []
    for name, pred, lo, hi in ((MODEL_NAME, y_hat, lower, upper), (BASELINE_NAME, ha, ha, ha)):
        pm = metrics_point(y, pred)
        im = metrics_interval(lo, hi, y)
        reports.append(MetricReport(pattern, rate, fold, name, pm["rmse"], pm["mae"], pm["r2"], pm["smape"],
                                    im["aiw"], im["riwm"], int(y.size), elapsed if name == MODEL_NAME else None))
    tidx = table.time_index()
    ids = [table.stations.ids[s] for s in table.station[eval_rows]]
    preds = {
        "time_index": tidx[eval_rows].tolist(),
        "station_id": ids,
        "y_true": y.tolist(),
        "y_pred": y_hat.tolist(),
        "lower": lower.tolist(),
        "upper": upper.tolist(),
        "ha_pred": ha.tolist(),
    }
    log = {
        "pattern": pattern, "rate": rate, "fold": fold, "mask_seed": seed,
        "rate_realized": plan.rate_realized, "removed": len(plan.removed),
        "particle_seeds": [p.seed for p in ens.particles],
        "sigma": [p.sigma * ens.stats.target_std for p in ens.particles],
    }
    return CellResult(pattern, rate, fold, reports, preds, log)


def _cell_job(args):
    spec, table, split, pattern, rate, fold = args
    return run_cell(spec, table, split, pattern, rate, fold)


def run_experiment(spec: ExperimentSpec, out_dir=None, jobs: int = 1) -> dict:
    """Run every (pattern, rate, fold) cell; return the aggregate report dict.

    When ``out_dir`` is given, writes ``aggregate.json``, ``run_log.json`` and
    one prediction CSV per cell.  Output bytes depend only on ``spec``.
    """
    table, _ = load_spec_data(spec)
    split = make_split(spec, table)
    n_folds = split.k if spec.max_folds is None else min(split.k, spec.max_folds)
    cells = [(spec, table, split, p, r, f) for p in spec.patterns for r in spec.rates for f in range(n_folds)]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_job, cells))
    else:
        results = [_cell_job(c) for c in cells]

    aggregate = {
        "spec_fingerprint": spec.fingerprint(),
        "rows": [rep.row() for res in results for rep in res.reports],
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "aggregate.json", aggregate)
        write_json(out / "run_log.json", {
            "spec": spec.to_dict(),
            "folds": [list(f) for f in split.folds],
            "cells": [res.log for res in results],
        })
        pred_dir = out / "predictions"
        pred_dir.mkdir(exist_ok=True)
        for res in results:
            write_predictions(pred_dir / f"{res.pattern}_r{res.rate:.2f}_f{res.fold}.csv", res.predictions)
    return aggregate


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_predictions(path, preds: Dict[str, list]) -> None:
    cols = ["time_index", "station_id", "y_true", "y_pred", "lower", "upper"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in zip(*(preds[c] for c in cols)):
            w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])


# ----------------------------------------------------------------- summaries

def summarize(rows: List[dict]) -> List[dict]:
    """Mean of each metric over folds, per (model, pattern, rate)."""
    groups: Dict[tuple, List[dict]] = {}
    for r in rows:
        groups.setdefault((r["model"], r["pattern"], r["rate"]), []).append(r)
    out = []
    for (model, pattern, rate), members in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        entry = {"model": model, "pattern": pattern, "rate": rate, "folds": len(members),
                 "n": int(sum(m["n"] for m in members))}
        for m in METRICS:
            vals = [x[m] for x in members if x[m] is not None]
            entry[m] = float(np.mean(vals)) if vals else None
        out.append(entry)
    return out


def plot_rows(summary: List[dict]) -> List[dict]:
    """Tidy long format: one row per (model, pattern, rate, metric)."""
    return [
        {"model": s["model"], "pattern": s["pattern"], "rate": s["rate"], "metric": m, "value": s[m]}
        for s in summary for m in METRICS
    ]
