"""Command-line entry point: ``bipedtune <command> [options]``.

Exit statuses: 0 success, 2 usage or configuration error, 3 infeasible
problem or fall, 4 input/output or verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import gait as gait_mod
from . import pipeline
from .config import ConfigError, ExperimentConfig
from .difftune import TuningFallError
from .grfm_net import ModelFormatError
from .mpc import InfeasibleStanceError
from .qp import QPError

EXIT_OK, EXIT_USAGE, EXIT_FALL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("bipedtune")


class UsageError(Exception):
    pass


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    common.add_argument("--output-dir", help="override the config's output_dir")
    common.add_argument("--verify", action="store_true",
                        help="check this command's recorded outputs against its manifest and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="bipedtune",
                                 description="MPC weight autotuning with a learned actuation model")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="one closed-loop rollout to CSV")
    p.add_argument("--trajectory", default="straight", help=f"one of {', '.join(gait_mod.PRESETS)}")
    p.add_argument("--theta", help="theta checkpoint (default: nominal weights)")
    m = p.add_mutually_exclusive_group()
    m.add_argument("--plant", dest="mode", action="store_const", const="plant")
    m.add_argument("--nominal", dest="mode", action="store_const", const="nominal")
    p.add_argument("--nets", choices=("none", "learned", "identity"), default="none",
                   help="actuation model in --nominal mode")
    p.set_defaults(mode="plant")

    sub.add_parser("collect-data", parents=[common], help="plant rollouts to a GRFM dataset")

    p = sub.add_parser("train-grfm", parents=[common], help="train the force and moment networks")
    p.add_argument("--dataset", help="dataset CSV (default: the collect-data output)")

    p = sub.add_parser("tune", parents=[common], help="DiffTune the MPC weights")
    m = p.add_mutually_exclusive_group(required=True)
    m.add_argument("--with-net", dest="with_net", action="store_true")
    m.add_argument("--without-net", dest="with_net", action="store_false")
    p.add_argument("--trajectory", action="append",
                   help="restrict to this preset (repeatable; default: all configured)")

    p = sub.add_parser("compare", parents=[common], help="evaluate parameter sets on the plant")
    p.add_argument("--theta", action="append", metavar="LABEL:TRAJECTORY=PATH",
                   help="checkpoint to evaluate (repeatable); default: nominal and tuned sets")

    sub.add_parser("run-all", parents=[common],
                   help="collect-data, train-grfm, tune both ways, compare")
    p = sub.add_parser("write-config", help="write the default config as YAML")
    p.add_argument("path")
    return ap


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.output_dir:
        cfg.output_dir = args.output_dir
    cfg.validate()
    return cfg


def _parse_theta_sets(items):
    sets = {"nominal": None}
    out = {}
    for item in items:
        try:
            key, path = item.split("=", 1)
            label, traj = key.split(":", 1)
        except ValueError as exc:
            raise UsageError(f"--theta expects LABEL:TRAJECTORY=PATH, got {item!r}") from exc
        out.setdefault(label, {})[traj] = path
    trajs = set().union(*[set(v) for v in out.values()])
    sets["nominal"] = {t: None for t in sorted(trajs)}
    sets.update(out)
    return sets


def _manifest_name(args):
    if args.command == "simulate":
        tag = args.mode if args.mode == "plant" or args.nets == "none" else f"nominal_{args.nets}_net"
        return [f"simulate_{args.trajectory}_{tag}"]
    if args.command == "tune":
        return [f"tune_{'with_net' if args.with_net else 'without_net'}"]
    if args.command == "run-all":
        return ["collect-data", "train-grfm", "tune_without_net", "tune_with_net", "compare"]
    return [args.command]


def _run(args):
    if args.command == "write-config":
        ExperimentConfig().save(args.path)
        print(f"wrote {args.path}")
        return EXIT_OK
    cfg = _load_config(args)
    if args.verify:
        for name in _manifest_name(args):
            pipeline.verify_manifest(cfg, name)
            print(f"verified {name}")
        return EXIT_OK

    if args.command == "simulate":
        if args.trajectory not in gait_mod.PRESETS:
            raise UsageError(f"unknown trajectory preset {args.trajectory!r}")
        if args.mode == "plant" and args.nets != "none":
            raise UsageError("--nets applies to --nominal rollouts only")
        path, log_ = pipeline.simulate(cfg, args.trajectory, args.theta, args.mode, args.nets)
        print(f"wrote {path} ({log_.n_steps} steps)")
        if log_.fell:
            print(f"robot fell at t = {log_.n_steps * log_.dt:.2f} s", file=sys.stderr)
            return EXIT_FALL
        return EXIT_OK
    if args.command == "collect-data":
        ds, n_fallen = pipeline.collect(cfg)
        print(f"records: {len(ds)}  fallen rollouts: {n_fallen}")
        return EXIT_OK
    if args.command == "train-grfm":
        meta = pipeline.train(cfg, args.dataset)
        for g in ("force", "moment"):
            print(f"{g}: final val MSE {meta[g]['final_val_mse']:.6g} "
                  f"(best {meta[g]['best_val_mse']:.6g} at epoch {meta[g]['best_epoch']})")
        return EXIT_OK
    if args.command == "tune":
        for name in args.trajectory or []:
            if name not in gait_mod.PRESETS:
                raise UsageError(f"unknown trajectory preset {name!r}")
        res = pipeline.tune(cfg, args.with_net, args.trajectory)
        for name, r in res.items():
            drop = 100.0 * (1.0 - r.loss_history[r.best_iteration] / r.loss_history[0])
            print(f"{name}: L {r.loss_history[0]:.6g} -> {r.loss_history[r.best_iteration]:.6g} "
                  f"({drop:.1f}% lower, best iteration {r.best_iteration})")
        return EXIT_OK
    if args.command == "compare":
        sets = _parse_theta_sets(args.theta) if args.theta else None
        rows = pipeline.compare(cfg, sets)
        print(pipeline.format_report(rows), end="")
        return EXIT_OK
    if args.command == "run-all":
        ds, n_fallen = pipeline.collect(cfg)
        print(f"records: {len(ds)}  fallen rollouts: {n_fallen}")
        pipeline.train(cfg)
        pipeline.tune(cfg, False)
        pipeline.tune(cfg, True)
        print(pipeline.format_report(pipeline.compare(cfg)), end="")
        return EXIT_OK
    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (UsageError, ConfigError, KeyError) as exc:
        print(f"bipedtune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TuningFallError, pipeline.FallError, InfeasibleStanceError, QPError) as exc:
        print(f"bipedtune: infeasible or fallen: {exc}", file=sys.stderr)
        return EXIT_FALL
    except (OSError, ModelFormatError, pipeline.VerifyError, ValueError) as exc:
        print(f"bipedtune: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
