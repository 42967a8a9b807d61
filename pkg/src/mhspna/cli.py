"""Command-line interface.

Exit codes: 0 success, 1 bad data or parameters, 2 I/O or usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .betweenness import (EVERYWHERE, SINGLE_ORIGIN, AnalysisSpec, FlowField, parse_column_name,
                          run_battery)
from .calibrate import (CalibratedModel, assemble_design, evaluate, predict_direct, predict_incremental,
                        predict_null, sweep_sigma)
from .config import ProjectConfig, load_config
from .errors import CalibrationError, ConfigError, MhspnaError, NetworkError
from .estimators import FlowRegressor
from .network import (SpatialNetwork, network_from_geojson, numeric_properties,
                      prepare_network, read_counts_csv, read_geojson, save_network, snap_count_points,
                      write_counts_csv)
from .synth import WEIGHT_PLANS, apply_weight_plan, grid_network, planted_counts

SCHEMA_VERSION = 1


class UsageError(Exception):
    """Inconsistent combination of flags; exit code 2."""


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _sibling(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix)


# --------------------------------------------------------------------------
# shared loading helpers


def _required_fields(analyses, net_index=()):
    fields = set()
    for s in analyses:
        fields.add(s.destination)
        if s.btype != SINGLE_ORIGIN or s.origin not in net_index:
            fields.add(s.origin)
    fields.discard(EVERYWHERE)
    return fields


def _load_for_analyses(path, analyses, tolerance):
    """Network with the weight fields the analyses need; missing ones are an error."""
    doc = read_geojson(path)
    ids = {str((f.get("properties") or {}).get("id")) for f in doc.get("features", [])}
    needed = _required_fields(analyses, ids)
    missing = sorted(needed - numeric_properties(doc))
    if missing:
        raise NetworkError(f"{path}: missing weight fields: {', '.join(missing)}")
    return network_from_geojson(doc, sorted(needed), tolerance, source=str(path)), doc


def _flow_columns(doc, wanted=None):
    meta = doc.get("mhspna") or {}
    names = meta.get("columns")
    if names is None:
        names = sorted(n for n in numeric_properties(doc) if "@" in n)
    if wanted is not None:
        if not set(wanted) <= set(names) & numeric_properties(doc):
            return None
        names = list(wanted)
    return names


def _fields_from_doc(net: SpatialNetwork, doc, names) -> list[FlowField]:
    by_id = {str(f["properties"]["id"]): f["properties"] for f in doc["features"]}
    fields = []
    for name in names:
        key, rmin, rmax = parse_column_name(name)
        vals = np.empty(len(net))
        for i, lid in enumerate(net.link_ids):
            v = by_id[lid].get(name)
            if v is None:
                raise NetworkError(f"link {lid!r} has no value for flow column {name}")
            vals[i] = float(v)
        fields.append(FlowField(key, (rmin, rmax), list(net.link_ids), vals))
    return fields


def _model_fields(model: CalibratedModel, path, cfg: ProjectConfig, threads):
    """Flow columns for ``model`` on the network at ``path``.

    A flows file that already carries every model column is used as is;
    otherwise the model's analyses are run on the network.
    """
    doc = read_geojson(path)
    names = _flow_columns(doc, model.columns)
    if names is not None:
        net = network_from_geojson(doc, (), cfg.junction_tolerance, source=str(path))
        return net, _fields_from_doc(net, doc, names)
    if not model.analyses or model.metric is None:
        raise ConfigError(f"{path} lacks the model's flow columns and the model records no analyses to compute them")
    from .metric import MetricParams
    specs = [AnalysisSpec.from_dict(a) for a in model.analyses]
    net, _ = _load_for_analyses(path, specs, cfg.junction_tolerance)
    fields = run_battery(net, specs, MetricParams.from_dict(model.metric), n_jobs=threads)
    return net, fields


def _records_for_year(path, year):
    recs = read_counts_csv(path)
    years = sorted({y for r in recs for y in r.observations})
    if year is None:
        if len(years) != 1:
            raise UsageError(f"{path} holds years {years}; choose one with --year")
        year = years[0]
    year = str(year)
    chosen = [r for r in recs if year in r.observations]
    if not chosen:
        raise CalibrationError(f"{path}: no observations for year {year}")
    return chosen, year


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args, cfg: ProjectConfig):
    doc = read_geojson(args.network)
    tol = cfg.junction_tolerance if args.tolerance is None else args.tolerance
    net = network_from_geojson(doc, sorted(numeric_properties(doc)), tol, source=args.network)
    prepared, report = prepare_network(net, keep_islands=args.keep_islands)
    save_network(prepared, args.out)
    report_path = args.report or _sibling(args.out, ".report.json")
    _write_json(report_path, report.to_dict())
    print(f"{len(net)} links in, {len(prepared)} out; "
          f"{len(report.duplicates_removed)} duplicates, {len(report.splits)} splits, "
          f"{len(report.components_flagged)} components flagged")
    return 0


def _metric_overrides(cfg: ProjectConfig, args) -> ProjectConfig:
    changes = {k: getattr(args, k) for k in ("a", "sigma", "oversample") if getattr(args, k, None) is not None}
    if changes:
        cfg = cfg.with_overrides(metric=cfg.metric.replace(**changes))
    return cfg


def cmd_analyze(args, cfg: ProjectConfig):
    cfg = _metric_overrides(cfg, args)
    if not cfg.analyses:
        raise ConfigError("no analyses configured")
    net, _ = _load_for_analyses(args.network, cfg.analyses, cfg.junction_tolerance)
    params = cfg.metric_params
    fields = run_battery(net, cfg.analyses, params, n_jobs=args.threads)
    meta = {"schema_version": SCHEMA_VERSION, "columns": [f.name for f in fields],
            "metric": params.to_dict(), "analyses": [s.to_dict() for s in cfg.analyses]}
    save_network(net, args.out, extra={f.name: f.values for f in fields}, meta=meta)
    csv_path = args.csv or _sibling(args.out, ".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link_id", "analysis", "radius", "value"])
        for f in fields:
            _, _, band = f.name.rpartition("@")
            for lid, v in zip(f.link_ids, f.values):
                w.writerow([lid, f.key, band, repr(float(v))])
    print(f"{len(fields)} flow columns on {len(net)} links -> {args.out}")
    return 0


def cmd_calibrate(args, cfg: ProjectConfig):
    doc = read_geojson(args.flows)
    names = _flow_columns(doc)
    if not names:
        raise ConfigError(f"{args.flows}: no flow columns found (run 'mhspna analyze' first)")
    net = network_from_geojson(doc, (), cfg.junction_tolerance, source=args.flows)
    fields = _fields_from_doc(net, doc, names)
    recs, year = _records_for_year(args.counts, args.year)
    tol = cfg.snap_tolerance if args.snap_tolerance is None else args.snap_tolerance
    points = snap_count_points(net, recs, tol)
    design = assemble_design(fields, points, year)
    reg = FlowRegressor(
        lambda_w=cfg.lambda_w if args.lambda_w is None else args.lambda_w,
        lambda_r=cfg.lambda_r if args.lambda_r is None else args.lambda_r,
        folds=cfg.folds if args.folds is None else args.folds,
        repetitions=cfg.repetitions if args.repetitions is None else args.repetitions,
        penalty_grid=cfg.penalty_grid,
        fit_intercept=cfg.fit_intercept and not args.no_intercept,
        nonnegative=cfg.nonnegative or args.nonnegative,
        seed=cfg.seed,
    )
    reg.fit(design.X, design.y)
    meta = doc.get("mhspna") or {}
    model = reg.to_model(design.columns, metric=meta.get("metric"), analyses=meta.get("analyses"), year=year)
    model.save(args.model)
    coef_path = args.coefficients or _sibling(args.model, ".coefficients.csv")
    model.write_coefficients_csv(coef_path)
    print(f"cv_r2 {model.cv_r2:.6f}  lambda_r {model.lambda_r:.6g}  points {len(points)}  columns {len(names)}")
    return 0


def _write_point_predictions(path, recs, preds, label):
    write_counts_csv(path, [(r.id, r.position[0], r.position[1], label, preds[r.id]) for r in recs])


def cmd_predict(args, cfg: ProjectConfig):
    mode = args.mode
    if mode == "null":
        if not args.baseline:
            raise UsageError("null mode needs --baseline")
        recs, year = _records_for_year(args.baseline, args.year)
        preds = predict_null({r.id: r.observations[year] for r in recs})
        _write_point_predictions(args.out, recs, preds, args.label or year)
        print(f"null predictions for {len(preds)} points -> {args.out}")
        return 0
    if not args.model or not args.network:
        raise UsageError(f"{mode} mode needs --model and --network")
    model = CalibratedModel.load(args.model)
    if mode == "direct":
        net, fields = _model_fields(model, args.network, cfg, args.threads)
        pred = predict_direct(model, fields, list(net.link_ids))
        meta = {"schema_version": SCHEMA_VERSION, "mode": "direct", "floored": int(pred.floored.sum())}
        save_network(net, args.out, extra={"prediction": pred.values, "floored": pred.floored}, meta=meta)
        print(f"direct predictions for {len(net)} links -> {args.out}")
        return 0
    if not args.network_t1 or not args.baseline:
        raise UsageError("incremental mode needs --network-t1 and --baseline")
    recs, year = _records_for_year(args.baseline, args.year)
    net1, fields1 = _model_fields(model, args.network_t1, cfg, args.threads)
    net2, fields2 = _model_fields(model, args.network, cfg, args.threads)
    tol = cfg.snap_tolerance if args.snap_tolerance is None else args.snap_tolerance
    pts1 = snap_count_points(net1, recs, tol)
    pts2 = snap_count_points(net2, recs, tol)
    preds = predict_incremental(model, fields1, fields2, pts1, year, pts2)
    _write_point_predictions(args.out, recs, preds, args.label or year)
    print(f"incremental predictions for {len(preds)} points -> {args.out}")
    return 0


def cmd_evaluate(args, cfg: ProjectConfig):
    obs_recs, year = _records_for_year(args.observations, args.year)
    observations = {r.id: r.observations[year] for r in obs_recs}
    text = Path(args.predictions).read_text()
    if text.lstrip().startswith("{"):
        doc = read_geojson(args.predictions)
        if "prediction" not in numeric_properties(doc):
            raise NetworkError(f"{args.predictions}: no 'prediction' property")
        net = network_from_geojson(doc, (), cfg.junction_tolerance, source=args.predictions)
        per_link = {str(f["properties"]["id"]): float(f["properties"]["prediction"]) for f in doc["features"]}
        tol = cfg.snap_tolerance if args.snap_tolerance is None else args.snap_tolerance
        pts = snap_count_points(net, obs_recs, tol)
        predictions = {p.id: per_link[p.link_id] for p in pts}
    else:
        pred_recs, pred_year = _records_for_year(args.predictions, args.pred_year)
        predictions = {r.id: r.observations[pred_year] for r in pred_recs}
    report = evaluate(predictions, observations)
    if args.out:
        _write_json(args.out, report.to_dict())
    r2 = "undefined" if report.r2 is None else f"{report.r2:.6f}"
    print(f"r2 {r2}  geh_mean {report.geh_mean:.4f}  geh<5 {report.geh_under_5_fraction:.3f}  "
          f"points {len(report.point_ids)}")
    return 0


def _auto_coefficients(fields, seed):
    rng = np.random.default_rng(seed)
    out = {}
    for f in fields:
        target = rng.uniform(20.0, 120.0)
        sd = float(np.std(f.values))
        out[f.name] = target / sd if sd > 0 else 0.0
    return out


def cmd_synth(args, cfg: ProjectConfig):
    seed = cfg.seed
    net = grid_network(args.n, args.m, args.spacing)
    if args.weights != "none":
        net = apply_weight_plan(net, args.weights, seed)
    save_network(net, args.out)
    print(f"{args.n}x{args.m} grid: {len(net)} links, {len(net.junctions)} junctions -> {args.out}")
    if not args.counts:
        return 0
    cfg = _metric_overrides(cfg, args)
    fields = run_battery(net, cfg.analyses, cfg.metric_params, n_jobs=args.threads)
    if args.coefficients:
        coef = json.loads(Path(args.coefficients).read_text())
        if not isinstance(coef, dict):
            raise ConfigError("coefficients file must map column names to numbers")
        coef = {str(k): float(v) for k, v in coef.items()}
    else:
        coef = _auto_coefficients(fields, seed)
    rows = planted_counts(net, fields, coef, args.intercept, args.points, noise=args.noise, seed=seed,
                          year=args.year)
    write_counts_csv(args.counts, rows)
    if args.truth:
        _write_json(args.truth, {"schema_version": SCHEMA_VERSION, "intercept": args.intercept,
                                 "coefficients": coef, "noise": args.noise,
                                 "metric": cfg.metric_params.to_dict()})
    print(f"{len(rows)} planted counts -> {args.counts}")
    return 0


def _grid(text):
    if text is None:
        return None
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_sweep_sigma(args, cfg: ProjectConfig):
    specs = [s for s in cfg.analyses if s.key == args.analysis]
    if not specs:
        raise ConfigError(f"no analysis {args.analysis!r} in the config")
    spec = specs[0]
    net, _ = _load_for_analyses(args.network, [spec], cfg.junction_tolerance)
    recs, year = _records_for_year(args.counts, args.year)
    tol = cfg.snap_tolerance if args.snap_tolerance is None else args.snap_tolerance
    points = snap_count_points(net, recs, tol)
    rows = sweep_sigma(net, spec, args.radius, _grid(args.sigma_grid), _grid(args.a_grid), points, year,
                       lambda_w=cfg.lambda_w, seed=cfg.seed, oversample=args.oversample, n_jobs=args.threads)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a", "sigma", "r2"])
        for a, s, r2 in rows:
            w.writerow([repr(a), repr(s), repr(r2)])
    best = max(rows, key=lambda r: -np.inf if np.isnan(r[2]) else r[2])
    print(f"{len(rows)} rows; best a={best[0]} sigma={best[1]} r2={best[2]:.4f} -> {args.out}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="project config JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads (results do not depend on it)")

    p = argparse.ArgumentParser(prog="mhspna", parents=[common],
                                description="Hybrid spatial network analysis of pedestrian flows")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help):
        sp = sub.add_parser(name, parents=[common], help=help, description=help)
        sp.set_defaults(func=func)
        return sp

    def metric_flags(sp):
        sp.add_argument("--a", type=float, help="hybrid angular/Euclidean coefficient")
        sp.add_argument("--sigma", type=float, help="randomization spread")
        sp.add_argument("--oversample", type=int, help="randomized repeats averaged per origin")

    sp = add("prepare", cmd_prepare, "split, deduplicate and prune a network")
    sp.add_argument("network")
    sp.add_argument("-o", "--out", required=True)
    sp.add_argument("--report", help="report JSON (default: <out>.report.json)")
    sp.add_argument("--tolerance", type=float, help="junction snap tolerance in metres")
    sp.add_argument("--keep-islands", action="store_true", help="keep disconnected components")

    sp = add("analyze", cmd_analyze, "run the betweenness battery")
    sp.add_argument("network")
    sp.add_argument("-o", "--out", required=True, help="flows GeoJSON")
    sp.add_argument("--csv", help="long-format flows CSV (default: <out>.csv)")
    metric_flags(sp)

    sp = add("calibrate", cmd_calibrate, "fit flow columns to counts")
    sp.add_argument("--flows", required=True, help="flows GeoJSON from 'analyze'")
    sp.add_argument("--counts", required=True)
    sp.add_argument("--year")
    sp.add_argument("-o", "--model", required=True, help="model JSON")
    sp.add_argument("--coefficients", help="coefficients CSV (default: <model>.coefficients.csv)")
    sp.add_argument("--lambda-r", type=float, help="fixed ridge penalty (skips cross-validation search)")
    sp.add_argument("--lambda-w", type=float, help="observation weighting exponent")
    sp.add_argument("--folds", type=int)
    sp.add_argument("--repetitions", type=int)
    sp.add_argument("--no-intercept", action="store_true")
    sp.add_argument("--nonnegative", action="store_true", help="constrain slopes to be >= 0")
    sp.add_argument("--snap-tolerance", type=float)

    sp = add("predict", cmd_predict, "predict flows with a calibrated model")
    sp.add_argument("--mode", choices=("direct", "incremental", "null"), required=True)
    sp.add_argument("--model")
    sp.add_argument("--network", help="network or flows GeoJSON for the predicted epoch")
    sp.add_argument("--network-t1", help="baseline-epoch network or flows GeoJSON")
    sp.add_argument("--baseline", help="baseline counts CSV")
    sp.add_argument("--year", help="baseline year label")
    sp.add_argument("--label", help="year label written to point predictions (default: baseline year)")
    sp.add_argument("--snap-tolerance", type=float)
    sp.add_argument("-o", "--out", required=True)

    sp = add("evaluate", cmd_evaluate, "score predictions against counts")
    sp.add_argument("--predictions", required=True, help="point CSV or direct-prediction GeoJSON")
    sp.add_argument("--observations", required=True)
    sp.add_argument("--year", help="observation year")
    sp.add_argument("--pred-year", help="prediction year label in a point CSV")
    sp.add_argument("--snap-tolerance", type=float)
    sp.add_argument("-o", "--out", help="report JSON")

    sp = add("synth", cmd_synth, "generate a grid network and optional planted counts")
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--m", type=int, default=10)
    sp.add_argument("--spacing", type=float, default=100.0)
    sp.add_argument("--weights", choices=WEIGHT_PLANS, default="none")
    sp.add_argument("-o", "--out", required=True)
    sp.add_argument("--counts", help="write planted counts CSV here")
    sp.add_argument("--points", type=int, default=60)
    sp.add_argument("--coefficients", help="JSON mapping column name to planted coefficient")
    sp.add_argument("--intercept", type=float, default=200.0)
    sp.add_argument("--noise", type=float, default=0.0, help="relative lognormal noise")
    sp.add_argument("--year", default="t1")
    sp.add_argument("--truth", help="write the planted model JSON here")
    metric_flags(sp)

    sp = add("sweep-sigma", cmd_sweep_sigma, "r2 of one analysis over sigma and a grids")
    sp.add_argument("--network", required=True)
    sp.add_argument("--counts", required=True)
    sp.add_argument("--year")
    sp.add_argument("--sigma-grid", default="0,0.5,1,1.5,2")
    sp.add_argument("--a-grid", default="0.5")
    sp.add_argument("--analysis", default="e2s", help="analysis key from the config")
    sp.add_argument("--radius", type=float, default=800.0)
    sp.add_argument("--oversample", type=int, default=5)
    sp.add_argument("--snap-tolerance", type=float)
    sp.add_argument("-o", "--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.threads = getattr(args, "threads", None)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else ProjectConfig()
        if getattr(args, "seed", None) is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        return args.func(args, cfg)
    except UsageError as e:
        print(f"mhspna {args.command}: error: {e}", file=sys.stderr)
        return 2
    except MhspnaError as e:
        print(f"mhspna {args.command}: error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"mhspna {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
