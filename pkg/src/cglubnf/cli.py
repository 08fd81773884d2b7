"""Command-line front end: ``mask``, ``train``, ``predict``, ``eval``, ``report``.

Exit codes: 0 success, 2 validation, 3 numerical failure, 4 I/O.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import masking
from .bayes import DivergenceError, Ensemble, load_ensemble, predict, predictive_variance, save_ensemble, train_ensemble
from .config import ConfigError, RunConfig
from .dataio import DataSchema, load_csv
from .evaluation import ExperimentSpec, plot_rows, run_experiment, summarize, write_json
from .model import Network, prepare, query_batch
from .plotting import rate_sweep_figure, training_curve_figure

logger = logging.getLogger("cglubnf")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------- mask

def _masked_rows_csv(src, dst, table, plan):
    """Copy ``src`` to ``dst`` blanking the target field of removed cells."""
    removed = set(plan.removed)
    t0 = table.t0
    with open(src, newline="", encoding="utf-8") as fin, open(dst, "w", newline="", encoding="utf-8") as fout:
        reader = csv.reader(fin)
        writer = csv.writer(fout, lineterminator="\n")
        header = next(reader)
        writer.writerow(header)
        ti, si, yi = header.index("timestamp"), header.index("station_id"), header.index("target")
        step = table.step_seconds
        for row in reader:
            if removed:
                ts = pd.Timestamp(row[ti])
                if ts.tzinfo is not None:
                    ts = ts.tz_convert(None)
                k = int((np.datetime64(ts.to_datetime64(), "s") - t0).astype(np.int64) // step)
                if (k, row[si]) in removed:
                    row[yi] = ""
            writer.writerow(row)


def cmd_mask(args) -> int:
    table, _ = load_csv(args.data, DataSchema(frequency=args.frequency))
    if args.plan:
        plan = masking.MaskPlan.from_json(Path(args.plan).read_text(encoding="utf-8"))
        masking.removed_rows(table, plan)  # validates every cell exists
    else:
        if args.pattern is None or args.rate is None or args.seed is None:
            raise ValidationError("--pattern, --rate and --seed are required unless --plan is given")
        plan = masking.simulate(table, args.pattern, args.rate, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mask_plan.json").write_text(plan.to_json() + "\n", encoding="utf-8")
    _masked_rows_csv(args.data, out / "masked.csv", table, plan)
    print(f"{plan.pattern}: removed {len(plan.removed)} cells, realized rate {plan.rate_realized:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------- train

def _write_curves(path, particles_curves):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "particle", "loss", "lr"])
        for m, curve in sorted(particles_curves.items()):
            for epoch, loss, lr in curve:
                w.writerow([epoch, m, repr(float(loss)), repr(float(lr))])


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    schema = DataSchema(covariates=config.data.covariates, frequency=config.data.frequency, strict=config.data.strict)
    table, stations = load_csv(args.data, schema)
    if args.mask_plan:
        plan = masking.MaskPlan.from_json(Path(args.mask_plan).read_text(encoding="utf-8"))
        table = masking.apply_plan(table, plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare(table, config)
    try:
        particles = train_ensemble(prep.network, prep.batch, config, jobs=args.jobs)
    except DivergenceError as exc:
        _write_curves(out / "training_curve.csv", {s - config.seed: c for s, c in exc.curves.items()})
        raise
    curves = {m: p.curve for m, p in enumerate(particles)}
    _write_curves(out / "training_curve.csv", curves)
    training_curve_figure(curves, out / "training_curve.png")
    ens = Ensemble(prep.network, prep.stats, particles, config, tuple(stations.ids), prep.sigma_d,
                   prep.global_descriptor)
    digest = save_ensemble(ens, out / "ensemble.json")
    print(f"trained {len(particles)} particle(s); bundle sha256 {digest}")
    return EXIT_OK


# ------------------------------------------------------------------- predict

def _query_batch(ens: Ensemble, queries: pd.DataFrame):
    """Encode query rows; unseen stations need lat/lon and join the graph as receivers."""
    stats, net = ens.stats, ens.network
    if "timestamp" not in queries or "station_id" not in queries:
        raise ValidationError("queries need timestamp and station_id columns")
    times = pd.to_datetime(queries["timestamp"], utc=True).dt.tz_localize(None).to_numpy().astype("datetime64[s]")
    lookup = {sid: i for i, sid in enumerate(ens.station_ids)}
    sids = queries["station_id"].astype(str).tolist()
    new_ids = [s for s in dict.fromkeys(sids) if s not in lookup]
    if new_ids:
        if "lat" not in queries or "lon" not in queries:
            raise ValidationError(f"unknown station {new_ids[0]!r} and no lat/lon columns")
        coords = []
        for sid in new_ids:
            rows = queries[queries["station_id"].astype(str) == sid]
            lat, lon = pd.to_numeric(rows["lat"]).iloc[0], pd.to_numeric(rows["lon"]).iloc[0]
            if not (np.isfinite(lat) and np.isfinite(lon)):
                raise ValidationError(f"unknown station {sid!r} without coordinates")
            coords.append((lat, lon))
        for k, sid in enumerate(new_ids):
            lookup[sid] = len(ens.station_ids) + k
        enc = net.encoder.with_extra_stations(np.array(coords), ens.global_descriptor, ens.sigma_d)
        net = Network(enc, net.n_layers, net.width, net.reduction)
    station = np.array([lookup[s] for s in sids], dtype=np.int64)
    cov_cols = []
    for name in stats.covariate_names:
        if name in queries:
            cov_cols.append(pd.to_numeric(queries[name], errors="coerce").to_numpy(dtype=float))
        else:
            logger.warning("covariate %s missing from queries; using its training mean", name)
            cov_cols.append(np.full(len(queries), np.nan))
    cov = np.column_stack(cov_cols) if cov_cols else np.zeros((len(queries), 0))
    return query_batch(net, stats, times, station, cov), net


def cmd_predict(args) -> int:
    if not 0.0 < args.level < 1.0:
        raise ValidationError("--level must lie in (0, 1)")
    ens = load_ensemble(args.model)
    queries = pd.read_csv(args.queries, dtype={"station_id": str})
    batch, net = _query_batch(ens, queries)
    mix = predict(ens, batch, net)
    lower, upper = mix.interval(args.level)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({
        "timestamp": queries["timestamp"],
        "station_id": queries["station_id"],
        "mean": mix.mean(),
        "variance": predictive_variance(mix),
        "lower": lower,
        "upper": upper,
    })
    frame.to_csv(out / "predictions.csv", index=False, float_format="%.17g", lineterminator="\n")
    print(f"wrote {len(frame)} predictions at level {args.level}")
    return EXIT_OK


# ---------------------------------------------------------------- eval/report

def cmd_eval(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    agg = run_experiment(spec, args.out, jobs=args.jobs)
    print(f"{len(agg['rows'])} report rows; fingerprint {agg['spec_fingerprint'][:12]}")
    return EXIT_OK


def _load_rows(paths):
    rows = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            p = p / "aggregate.json"
        with open(p, encoding="utf-8") as fh:
            data = json.load(fh)
        if "rows" not in data:
            raise ValidationError(f"{p} is not an aggregate report")
        rows.extend(data["rows"])
    return rows


def _csv_value(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_table(path, rows, cols):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_csv_value(r[c]) for c in cols])


def cmd_report(args) -> int:
    rows = _load_rows(args.runs)
    summary = summarize(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        write_json(out / "report.json", {"summary": summary})
    elif args.format == "csv":
        cols = ["model", "pattern", "rate", "folds", "n", "rmse", "mae", "r2", "smape", "aiw", "riwm"]
        _write_table(out / "report.csv", summary, cols)
    else:
        tidy = plot_rows(summary)
        _write_table(out / "plotdata.csv", tidy, ["model", "pattern", "rate", "metric", "value"])
        rate_sweep_figure(tidy, out / "rate_sweep.png")
    print(f"report ({args.format}) with {len(summary)} summary rows written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cglubnf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mask", help="simulate a missing-data pattern")
    m.add_argument("--data", required=True)
    m.add_argument("--pattern", choices=masking.PATTERNS)
    m.add_argument("--rate", type=float)
    m.add_argument("--seed", type=int)
    m.add_argument("--plan", help="replay an existing mask plan instead of sampling")
    m.add_argument("--frequency", default="hourly")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mask)

    t = sub.add_parser("train", help="train a particle ensemble")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--mask-plan")
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predictive mean, variance and interval")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="run an experiment spec")
    e.add_argument("--spec", required=True)
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summarize aggregate reports")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--format", choices=("json", "csv", "plotdata"), default="json")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
