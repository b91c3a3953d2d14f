"""Command-line entry point: one subcommand per pipeline stage plus synth, sweep and run."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import ingest, lme, ols, synth
from .pipeline import (
    STAGES, RunConfig, StageData, StageError, config_hash, emit_plots, load_outputs,
    read_csv, run_pipeline, sweep_windows, write_csv, write_json,
)

log = logging.getLogger("collabscale")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _names(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _global_flags(default) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps values given before the subcommand
    common = argparse.ArgumentParser(add_help=False, argument_default=default)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=["github", "wikipedia"])
    common.add_argument("--window-months", type=int)
    common.add_argument("--events", help="event log (CSV or JSONL)")
    common.add_argument("--projects", help="project profiles CSV")
    common.add_argument("--users", help="user profiles CSV")
    common.add_argument("--bots", help="bot list, one user id per line")
    common.add_argument("-v", "--verbose", action="store_true", default=default)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="collabscale", description=__doc__, parents=[_global_flags(None)])
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("ingest", "metrics", "fit-powerlaw", "unify"):
        sub.add_parser(name, parents=[common])

    p = sub.add_parser("ols", parents=[common])
    p.add_argument("--response")
    p.add_argument("--features", type=_names)
    p.add_argument("--prune-threshold", type=float)
    p.add_argument("--outlier-percentile", type=float)

    p = sub.add_parser("lme", parents=[common])
    p.add_argument("--group-by", choices=sorted(lme.BIN_ATTRIBUTES))
    p.add_argument("--bins", type=int)
    p.add_argument("--response", default="work")
    p.add_argument("--fixed", type=_names)

    p = sub.add_parser("chained", parents=[common])
    p.add_argument("--span", type=int)
    p.add_argument("--stride", type=int)

    p = sub.add_parser("s3d", parents=[common])
    p.add_argument("--max-features", type=int)
    p.add_argument("--lambda-grid", type=_floats)
    p.add_argument("--folds", type=int)

    p = sub.add_parser("synth", parents=[common])
    p.add_argument("--n-users", type=int)

    p = sub.add_parser("sweep", parents=[common])
    p.add_argument("--windows", type=_ints, default=[1, 2, 3, 4, 5, 6])

    p = sub.add_parser("run", parents=[common])
    p.add_argument("--svg", action="store_true", help="also render SVG figures")
    p.add_argument("--check-truth", help="truth.json from synth; compare planted parameters")
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config and args.command != "synth":
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        cfg = RunConfig.from_json(path)
    overrides = {
        "out": args.out, "seed": args.seed, "mode": args.mode, "window_months": args.window_months,
        "events": args.events, "projects": args.projects, "users": args.users, "bots": args.bots,
    }
    extra = {
        "prune_threshold": getattr(args, "prune_threshold", None),
        "outlier_percentile": getattr(args, "outlier_percentile", None),
        "lme_bins": getattr(args, "bins", None),
        "span": getattr(args, "span", None),
        "stride": getattr(args, "stride", None),
        "s3d_max_features": getattr(args, "max_features", None),
        "s3d_lambdas": getattr(args, "lambda_grid", None),
        "s3d_folds": getattr(args, "folds", None),
    }
    changes = {k: v for k, v in {**overrides, **extra}.items() if v is not None}
    return replace(cfg, **changes)


def _run_stage(name: str, cfg: RunConfig, data: StageData | None = None) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    fn = dict(STAGES)[name]
    try:
        fn(cfg, data or StageData(), out, config_hash(cfg))
    except (FileNotFoundError, UsageError, ingest.IngestError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def cmd_ols(args, cfg: RunConfig) -> None:
    if not (args.response or args.features):
        _run_stage("ols", cfg)
        return
    out = Path(cfg.out)
    rows_path = out / "rows.csv"
    if not rows_path.exists():
        raise FileNotFoundError(f"rows table not found: {rows_path}")
    rows = read_csv(rows_path)
    response = args.response or "work"
    features = args.features or ["group_size"]
    missing = [c for c in [response, *features] if c not in rows]
    if missing:
        raise UsageError(f"unknown columns: {missing}")
    try:
        report = ols.regress(rows[~rows["capped"].astype(bool)], response, features, cfg.prune_threshold,
                             cfg.outlier_percentile)
    except Exception as exc:
        raise StageError("ols", exc) from exc
    from .pipeline import _ols_layout
    write_json(out / "ols.json", {"custom": _ols_layout(report)}, config_hash(cfg))


def cmd_lme(args, cfg: RunConfig) -> None:
    if not (args.group_by or args.fixed):
        _run_stage("lme", cfg)
        return
    out = Path(cfg.out)
    rows_path = out / "rows.csv"
    if not rows_path.exists():
        raise FileNotFoundError(f"rows table not found: {rows_path}")
    rows = read_csv(rows_path)
    rows = rows[~rows["capped"].astype(bool)]
    if cfg.outlier_percentile is not None:
        rows = ols.filter_outliers_p95(rows, args.response, cfg.outlier_percentile)
    fixed = args.fixed or ["group_size"]
    spec = lme.BinSpec(args.group_by or "user_id", cfg.lme_bins)
    try:
        if spec.mode == "level":
            summary = lme.fit_binned(rows, spec, args.response, fixed).summary()
        else:
            summary = lme.fit_grouped_by(rows, spec, args.response, fixed)
    except Exception as exc:
        raise StageError("lme", exc) from exc
    write_json(out / "lme.json", {"fixed": fixed, "table": [summary]}, config_hash(cfg))


def cmd_chained(args, cfg: RunConfig) -> None:
    data = StageData()
    _run_stage("chained", cfg, data)
    _run_stage("unify", cfg, data)


def cmd_synth(args, cfg: RunConfig) -> None:
    params = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        params = json.loads(path.read_text())
    if args.seed is not None:
        params["seed"] = args.seed
    if args.mode is not None:
        params["mode"] = args.mode
    if args.window_months is not None:
        params["window_months"] = args.window_months
    if args.n_users is not None:
        params["n_users"] = args.n_users
    try:
        conf = synth.SynthConfig.from_dict(params)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synth config: {exc}")
    if not args.out:
        raise UsageError("synth needs --out")
    events, _, _, truth = synth.generate(conf, args.out)
    print(f"wrote {len(events)} events for {conf.n_users} users to {args.out}")


def cmd_sweep(args, cfg: RunConfig) -> None:
    if len(args.windows) < 2:
        raise UsageError("--windows needs at least two values")
    try:
        report = sweep_windows(cfg, args.windows)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise StageError("sweep", exc) from exc
    out = Path(cfg.out)
    stamp = config_hash(cfg)
    write_json(out / "sensitivity.json", report.to_dict(), stamp)
    for t, curve in report.curves.items():
        write_csv(out / f"unified_t{t}.csv", curve.to_frame(), stamp)
    for t, reason in report.skipped.items():
        print(f"window {t} skipped: {reason}", file=sys.stderr)


def cmd_run(args, cfg: RunConfig) -> None:
    cfg = replace(cfg, emit_svg=cfg.emit_svg or args.svg)
    out = run_pipeline(cfg)
    if args.check_truth:
        path = Path(args.check_truth)
        if not path.exists():
            raise FileNotFoundError(f"truth file not found: {path}")
        checks = synth.truth_check(json.loads(path.read_text()), load_outputs(out))
        for c in checks:
            status = "ok" if c.passed else "FAIL"
            print(f"{status:4} {c.parameter}: planted {c.planted:.4g} recovered {c.recovered:.4g} (tol {c.tolerance:.3g})")
        if not all(c.passed for c in checks):
            raise StageError("truth-check", RuntimeError("planted parameters not recovered"))


STAGE_COMMANDS = {"ingest": "ingest", "metrics": "metrics", "fit-powerlaw": "scaling", "unify": "unify",
                  "s3d": "s3d"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command in STAGE_COMMANDS:
            _run_stage(STAGE_COMMANDS[args.command], cfg)
            if args.command in ("fit-powerlaw", "unify"):
                emit_plots(Path(cfg.out), config_hash(cfg))
        else:
            handler = {"ols": cmd_ols, "lme": cmd_lme, "chained": cmd_chained, "synth": cmd_synth,
                       "sweep": cmd_sweep, "run": cmd_run}[args.command]
            handler(args, cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ingest.IngestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
