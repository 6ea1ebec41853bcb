"""Command-line entry point: declarative config, stage subcommands.

Exit codes: 0 success, 2 config error, 3 missing upstream artifact,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import pipeline as pl
from .config import ConfigError, RunConfig, load_config, make_config
from .scheduler import TrainingDiverged

SCHEDULER_CHOICES = ("always_on", "greedy_off", "infogain", "random1",
                     "random2", "sigma_mean", "sample_spread", "csac",
                     "despot", "pure_rl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="senseplan")
    sub = top.add_subparsers(dest="command", required=True)

    def stage(name, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument("--config", help="config file (flat dotted keys)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                       help="override a config value")
        p.add_argument("--out", help="run directory (overrides out_dir)")
        return p

    stage("gen-worlds", help="generate evaluation/training worlds")
    stage("gen-data", help="replay demonstrations into the snippet corpus")
    stage("train-teacher", help="train the multi-step planner")
    stage("distill", help="distill the one-step student")
    p = stage("train-scheduler", help="train the sensor scheduler")
    p.add_argument("--variant", choices=("csac", "pure_rl"), default="csac")
    stage("calibrate", help="fit the risk-scalar calibration")
    p = stage("eval", help="run paired-seed evaluation episodes")
    p.add_argument("--scheduler", action="append", choices=SCHEDULER_CHOICES,
                   help="scheduler(s) to evaluate (repeatable)")
    p = stage("latency-sweep", help="time decisions across world radii")
    p.add_argument("--calls", type=int, default=100)
    stage("ablate-cvar", help="retrain and evaluate per tail level")
    p = stage("inject-fault", help="forced sensor outage episodes")
    p.add_argument("--sensor", default="gnss")
    p.add_argument("--t-off", type=int, default=2)
    p.add_argument("--scheduler", choices=SCHEDULER_CHOICES, default="csac")
    p.add_argument("--seeds", type=int, default=20)
    return top


def _load(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        from .config import parse_config
        text = "\n".join(f"{k} = {v}" for k, v in overrides.items())
        cfg = make_config(parse_config(text))
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _dispatch(args, cfg: RunConfig, paths: pl.RunPaths) -> int:
    cmd = args.command
    if cmd == "gen-worlds":
        worlds = pl.gen_worlds(cfg, paths)
        print(f"wrote {len(worlds)} worlds to {paths.join('worlds')}")
    elif cmd == "gen-data":
        worlds = pl.load_worlds(cfg, paths)
        snippets = pl.gen_data(cfg, paths, worlds)
        print(f"wrote {len(snippets)} snippets to {paths.corpus}")
    elif cmd == "train-teacher":
        train, _, _ = pl.split_corpus(cfg, pl.load_corpus(cfg, paths))
        pl.train_teacher_stage(cfg, paths, train)
        print(f"teacher checkpoint: {paths.checkpoint('teacher')}")
    elif cmd == "distill":
        teacher = pl.load_teacher(cfg, paths)
        train, _, _ = pl.split_corpus(cfg, pl.load_corpus(cfg, paths))
        pl.distill_stage(cfg, paths, teacher, train)
        print(f"student checkpoint: {paths.checkpoint('student')}")
    elif cmd == "calibrate":
        student = pl.load_student(cfg, paths)
        worlds = pl.load_worlds(cfg, paths)
        scale = pl.calibrate_stage(cfg, paths, student, worlds)
        print(f"calibration scale: {scale:.4f}")
    elif cmd == "train-scheduler":
        student = pl.load_student(cfg, paths)
        worlds = pl.load_worlds(cfg, paths)
        scale = pl.load_calibration(cfg, paths)
        if args.variant == "pure_rl":
            pl.train_pure_rl(cfg, paths, student, worlds)
            print(f"pure-rl checkpoint: {paths.checkpoint('pure_rl')}")
        else:
            pl.train_scheduler_stage(cfg, paths, student, worlds,
                                     calibration=scale)
            print(f"scheduler checkpoint: {paths.checkpoint('csac')}")
    elif cmd == "eval":
        student = pl.load_student(cfg, paths)
        worlds = pl.load_worlds(cfg, paths)
        scale = pl.load_calibration(cfg, paths)
        names = args.scheduler or ["always_on", "csac", "random1"]
        _, rows = pl.eval_stage(cfg, paths, student, worlds, names,
                                calibration=scale)
        for row in rows:
            print(f"{row['scheduler']:>14}: goal {row['goal_pct']:.1f}%  "
                  f"energy {row['energy_vs_aon_pct']:.1f}%  "
                  f"violations {row['cvar_violation_pct']:.2f}%")
    elif cmd == "latency-sweep":
        student = pl.load_student(cfg, paths)
        _, exps = pl.latency_stage(cfg, paths, student, calls=args.calls)
        for method, exp in sorted(exps.items()):
            print(f"{method:>10}: exponent {exp:.2f}")
    elif cmd == "ablate-cvar":
        student = pl.load_student(cfg, paths)
        worlds = pl.load_worlds(cfg, paths)
        scale = pl.load_calibration(cfg, paths)
        rows = pl.ablate_cvar_stage(cfg, paths, student, worlds,
                                    calibration=scale)
        for row in rows:
            print(f"alpha {row['alpha']:.2f}: "
                  f"energy {row['energy_vs_aon_pct']:.1f}%  "
                  f"violations {row['cvar_violation_pct']:.2f}%")
    elif cmd == "inject-fault":
        student = pl.load_student(cfg, paths)
        worlds = pl.load_worlds(cfg, paths)
        if args.scheduler == "csac":
            policy = pl.load_scheduler(cfg, paths)
        else:
            from .baselines import make_policy
            policy = make_policy(args.scheduler)
        summary, _ = pl.inject_fault_stage(cfg, paths, student, worlds,
                                           policy, sensor=args.sensor,
                                           t_off=args.t_off, seeds=args.seeds)
        print(f"u spike on {summary['u_spike_frac']:.0%}, compensation on "
              f"{summary['compensated_frac']:.0%} of observable episodes")
    else:
        raise ConfigError(f"unknown command {cmd!r}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    paths = pl.RunPaths(cfg.out_dir)
    try:
        return _dispatch(args, cfg, paths)
    except pl.MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
