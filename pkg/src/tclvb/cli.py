"""Command-line entry point: ``tclvb <stage> --config scenario.json``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .pipeline import EXIT_CODES, Pipeline, PipelineError, ScenarioConfig

log = logging.getLogger("tclvb")


def _load_config(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config) if args.config else ScenarioConfig()
    if args.output_dir:
        cfg.output_dir = args.output_dir
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_init(p: Pipeline, args) -> None:
    path = Path(args.path)
    if path.exists() and not args.force:
        raise SystemExit(f"{path} exists; pass --force to overwrite")
    p.config.save(path)
    print(path)


def cmd_baseline(p: Pipeline, args) -> None:
    ens, base = p.baseline()
    _emit({"dir": str(p.stage_dir("baseline")), "n_devices": ens.n, "mean_kw": float(base.power.mean())})


def cmd_envelope(p: Pipeline, args) -> None:
    envs = p.envelopes()
    _emit({
        "dir": str(p.stage_dir("envelope")),
        **{f"{k}_p_plus_at_end": float(v.plus_at_grid[-1]) for k, v in envs.items()},
    })


def cmd_signals(p: Pipeline, args) -> None:
    sig = p.signals()
    _emit({"dir": str(p.stage_dir("signals")), "candidates": len(sig["candidates"]),
           "accepted": len(sig["accepted"])})


def cmd_track(p: Pipeline, args) -> None:
    if args.signal is None:
        tr = p.tracking()
        _emit({"dir": str(p.stage_dir("track")), "tracked": len(tr["F"]),
               "failed": int((tr["F"] < p.config.horizon).sum())})
        return
    res = p.track_one(args.signal)
    out = p.stage_dir("track")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"signal_{args.signal}.csv"
    res.to_csv(path)
    _emit({"signal": args.signal, "violation_time_s": res.violation_time, "csv": str(path)})


def cmd_fit(p: Pipeline, args) -> None:
    _emit({m: r.record() for m, r in p.fits().items()})


def cmd_validate(p: Pipeline, args) -> None:
    _emit(p.validation())


def cmd_report(p: Pipeline, args) -> None:
    _emit(p.report().to_dict())


COMMANDS = {
    "baseline": (cmd_baseline, "simulate the thermostat-only baseline"),
    "envelope": (cmd_envelope, "compute sustained and instant power envelopes"),
    "signals": (cmd_signals, "generate or load signals and filter them by the envelope"),
    "track": (cmd_track, "track accepted signals and record violation times"),
    "fit": (cmd_fit, "fit VB parameters for each initial-condition mode"),
    "validate": (cmd_validate, "compare SOC traces and violation times"),
    "report": (cmd_report, "write the run report and plot-ready CSVs"),
    "all": (cmd_report, "run every stage"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tclvb", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    init = sub.add_parser("init", help="write the default scenario config")
    init.add_argument("path")
    init.add_argument("--force", action="store_true")
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("-c", "--config", help="scenario JSON (defaults if omitted)")
        sp.add_argument("-o", "--output-dir", help="override the config's output directory")
        if name == "track":
            sp.add_argument("--signal", type=int, help="track one accepted candidate and export its CSV")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "init":
        cmd_init(Pipeline(ScenarioConfig()), args)
        return 0
    try:
        cfg = _load_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"tclvb: invalid config: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    fn, _ = COMMANDS[args.command]
    try:
        fn(Pipeline(cfg), args)
    except PipelineError as exc:
        print(f"tclvb: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
