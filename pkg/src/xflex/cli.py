"""Command-line interface.

Exit codes: 0 success, 2 validation/input error, 3 convergence failure.
Parallelism across replications, districts, and folds is capped by the
XFLEX_THREADS environment variable (default 1).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import pandas as pd

from . import pipeline
from .exceptions import ConvergenceError, ValidationError
from .simlab import ScanConfig, run_scenario, scenario_config, threshold_scan


def _parse_leads(raw: str) -> list[float]:
    try:
        leads = [float(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError:
        raise ValidationError(f"--lead-hours must be a comma-separated number list, got {raw!r}")
    if not leads:
        raise ValidationError("--lead-hours is empty")
    if any(v < 0 for v in leads):
        raise ValidationError(f"--lead-hours must be nonnegative, got {leads}")
    return leads


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_inputs(args, *, bands: bool = True):
    faults = pipeline.load_faults(args.faults)
    weather = pipeline.load_weather(args.weather)
    config = pipeline.load_config(args.config)
    band_map = pipeline.load_bands(args.bands) if bands else None
    return faults, weather, config, band_map


def _cmd_simulate(args) -> int:
    config = scenario_config(args.scenario, args.xi, n_reps=args.reps, n_per_rep=args.n, seed=args.seed)
    result = run_scenario(config)
    out = _out_dir(args)
    result["per_rep"].to_csv(out / "per_rep.csv", index=False)
    result["summary"].to_csv(out / "summary.csv", index=False)
    print(f"scenario {args.scenario} (xi={args.xi}): {args.reps} replications, "
          f"{result['failures']} failed")
    print(result["summary"].to_string(index=False))
    return 0


def _cmd_threshold_scan(args) -> int:
    base = scenario_config(args.scenario, args.xi, n_reps=args.reps, n_per_rep=args.n, seed=args.seed)
    result = threshold_scan(ScanConfig(base=base))
    out = _out_dir(args)
    result["estimates"].to_csv(out / "estimates.csv", index=False)
    result["rmse"].to_csv(out / "rmse.csv", index=False)
    result["per_rep"].to_csv(out / "per_rep.csv", index=False)
    print(f"threshold scan, scenario {args.scenario} (xi={args.xi}): "
          f"{result['failures']} failed candidate fits")
    print(result["estimates"].to_string(index=False))
    return 0


def _cmd_fit(args) -> int:
    faults, weather, config, band_map = _load_inputs(args)
    train = pipeline.training_frame(faults, weather)
    out = _out_dir(args)
    for district in sorted(train["district"].unique()):
        band = band_map.get(district)
        if band is None:
            raise ValidationError(f"no band thresholds configured for district {district!r}")
        bundle = pipeline.fit_bundle(train[train["district"] == district], config, band, district)
        path = out / f"bundle_{district}.json"
        pipeline.save_bundle(bundle, path)
        print(f"{district}: xi={bundle.tail.xi:.3f}, "
              f"{bundle.tail.n_exceedances} exceedances -> {path}")
    return 0


def _load_bundles(bundle_dir) -> dict[str, pipeline.ModelBundle]:
    paths = sorted(Path(bundle_dir).glob("bundle_*.json"))
    if not paths:
        raise ValidationError(f"no bundle_*.json files under {bundle_dir}")
    bundles = {}
    for p in paths:
        b = pipeline.load_bundle(p)
        bundles[b.district] = b
    return bundles


def _cmd_forecast(args) -> int:
    weather = pipeline.load_weather(args.weather)
    bundles = _load_bundles(args.bundles)
    leads = _parse_leads(args.lead_hours)
    records = pipeline.forecast_many(bundles, weather, leads, mode=args.mode)
    config = next(iter(bundles.values())).config
    table = pipeline.forecast_table(records, levels=config.eval_levels)
    out = _out_dir(args)
    path = out / "forecasts.csv"
    table.to_csv(path, index=False)
    print(f"{len(records)} forecasts -> {path}")
    return 0


def _cmd_evaluate(args) -> int:
    faults = pipeline.load_faults(args.faults)
    weather = pipeline.load_weather(args.weather)
    bundles = _load_bundles(args.bundles)
    leads = _parse_leads(args.lead_hours)
    band_map = {d: b.band for d, b in bundles.items()}
    if args.bands:
        band_map = pipeline.load_bands(args.bands)
    config = next(iter(bundles.values())).config
    records = pipeline.forecast_many(bundles, weather, leads, mode=args.mode)
    report = pipeline.evaluate(
        records, faults, band_map, config,
        twcrps_samples=args.twcrps_samples,
        baseline_source=args.mode, baseline_lead=min(leads),
    )
    out = _out_dir(args)
    written = report.write(out)
    print(f"{len(records)} forecasts scored; reports: "
          + ", ".join(str(p) for p in written))
    print(json.dumps(report.summary, indent=2))
    return 0


def _cmd_cv(args) -> int:
    faults, weather, config, band_map = _load_inputs(args)
    result = pipeline.cross_validate(faults, weather, config, band_map)
    out = _out_dir(args)
    result.audit.to_csv(out / "audit.csv", index=False)
    if result.records:
        table = pipeline.forecast_table(result.records, levels=config.eval_levels)
        table.to_csv(out / "cv_forecasts.csv", index=False)
        report = pipeline.evaluate(
            records=result.records, faults=faults, bands=band_map, config=config,
            twcrps_samples=args.twcrps_samples,
            baseline_source="hindcast", baseline_lead=0.0,
        )
        report.write(out)
    leaks = int(result.audit["leak"].sum()) if len(result.audit) else 0
    print(f"{len(result.records)} hindcasts over {len(result.plan.folds)} folds; "
          f"{leaks} leaked rows; {len(result.failures)} failed fold fits")
    for f in result.failures:
        print(f"  FAILED {f['district']} {f['fold']}: {f['error']}", file=sys.stderr)
    if any(f["kind"] == "convergence" for f in result.failures):
        return 3
    if result.failures:
        return 2
    return 0


def _cmd_select(args) -> int:
    faults, weather, config, band_map = _load_inputs(args)
    result = pipeline.select_model(faults, weather, config, band_map)
    out = _out_dir(args)
    path = out / "selection.json"
    path.write_text(json.dumps(result, indent=2))
    chosen = result["chosen"]
    print(f"chosen alpha_t={chosen['alpha_t']}, tail terms="
          f"{[t['name'] for t in chosen['tail_terms']] or 'constant'} -> {path}")
    return 0


def _cmd_make_demo(args) -> int:
    paths = pipeline.make_demo_dataset(
        args.out, seed=args.seed, n_districts=args.districts, n_members=args.members
    )
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xflex",
        description="Probabilistic count forecasting with spliced extreme tails.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a simulation scenario against the oracle")
    sim.add_argument("--scenario", type=int, choices=(1, 2, 3), required=True)
    sim.add_argument("--xi", type=float, default=0.3)
    sim.add_argument("--reps", type=int, default=100)
    sim.add_argument("--n", type=int, default=5000, help="training rows per replication")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=_cmd_simulate)

    scan = sub.add_parser("threshold-scan", help="tail sensitivity to the splice level")
    scan.add_argument("--scenario", type=int, choices=(1, 2, 3), required=True)
    scan.add_argument("--xi", type=float, default=0.3)
    scan.add_argument("--reps", type=int, default=50)
    scan.add_argument("--n", type=int, default=5000)
    scan.add_argument("--seed", type=int, default=0)
    scan.add_argument("--out", required=True)
    scan.set_defaults(func=_cmd_threshold_scan)

    fit = sub.add_parser("fit", help="fit one bundle per district")
    fit.add_argument("--faults", required=True)
    fit.add_argument("--weather", required=True)
    fit.add_argument("--bands", required=True)
    fit.add_argument("--config", required=True)
    fit.add_argument("--out", required=True)
    fit.set_defaults(func=_cmd_fit)

    fc = sub.add_parser("forecast", help="combined forecasts from NWP ensemble rows")
    fc.add_argument("--weather", required=True)
    fc.add_argument("--bundles", required=True, help="directory holding bundle_*.json")
    fc.add_argument("--mode", choices=pipeline.MODES, default="eps+hres")
    fc.add_argument("--lead-hours", default="0", help="comma-separated lead times")
    fc.add_argument("--out", required=True)
    fc.set_defaults(func=_cmd_forecast)

    ev = sub.add_parser("evaluate", help="score forecasts against observed counts")
    ev.add_argument("--faults", required=True)
    ev.add_argument("--weather", required=True)
    ev.add_argument("--bundles", required=True)
    ev.add_argument("--bands", default=None, help="optional override of bundle thresholds")
    ev.add_argument("--mode", choices=pipeline.MODES, default="eps+hres")
    ev.add_argument("--lead-hours", default="0")
    ev.add_argument("--twcrps-samples", type=int, default=None)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=_cmd_evaluate)

    cv = sub.add_parser("cv", help="leave-one-regulatory-year-out hindcast")
    cv.add_argument("--faults", required=True)
    cv.add_argument("--weather", required=True)
    cv.add_argument("--bands", required=True)
    cv.add_argument("--config", required=True)
    cv.add_argument("--twcrps-samples", type=int, default=2000)
    cv.add_argument("--out", required=True)
    cv.set_defaults(func=_cmd_cv)

    sel = sub.add_parser("select", help="choose alpha_t and tail terms by CV skill")
    sel.add_argument("--faults", required=True)
    sel.add_argument("--weather", required=True)
    sel.add_argument("--bands", required=True)
    sel.add_argument("--config", required=True)
    sel.add_argument("--out", required=True)
    sel.set_defaults(func=_cmd_select)

    demo = sub.add_parser("make-demo", help="write a small synthetic demo corpus")
    demo.add_argument("--out", required=True)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--districts", type=int, default=2)
    demo.add_argument("--members", type=int, default=8)
    demo.set_defaults(func=_cmd_make_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except pd.errors.ParserError as exc:
        print(f"error: malformed CSV ({exc})", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
