"""Command-line entry point: gen-cycle, reachset, train, rollout, baseline, compare."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .adp import InfeasibleSample, RolloutStuck, ValuePolicy, rollout
from .baseline import InfeasibleCycle
from .config import ConfigError, dump_config, load_config
from .cycles import KINDS, SyntheticCycleSpec, generate_cycle
from .dynamics import DemandTrace, load_cycle_csv, write_cycle_csv
from .experiment import StageFailure, baseline_for, reachable_for, run_compare, train_for
from .reachable import ConfigurationError, InfeasibleProblem
from .valuenet import CorruptedModel, TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2  # bad config, arguments or input files
EXIT_INFEASIBLE = 3
EXIT_TRAINING = 4

log = logging.getLogger("flexhev")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageFailure):
        exc = exc.cause
    if isinstance(exc, (InfeasibleProblem, InfeasibleCycle, RolloutStuck, InfeasibleSample)):
        return EXIT_INFEASIBLE
    if isinstance(exc, (TrainingDiverged, CorruptedModel)):
        return EXIT_TRAINING
    if isinstance(exc, (ConfigError, ConfigurationError, ValueError, OSError)):
        return EXIT_CONFIG
    raise exc


def _common(p: argparse.ArgumentParser, cycle: bool = True):
    p.add_argument("--config", help="key = value config file (defaults if omitted)")
    if cycle:
        p.add_argument("--cycle", help="t,v drive-cycle CSV (overrides the config's cycle key)")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--cache", help="reachable-set cache directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flexhev", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-cycle", help="write a synthetic t,v cycle")
    _common(g, cycle=False)
    g.add_argument("--kind", choices=KINDS, default="urban")
    g.add_argument("--duration", type=float, default=90.0, help="s")
    g.add_argument("--v-max", type=float, default=15.0, help="m/s")
    g.add_argument("--accel", type=float, default=1.0, help="m/s^2")

    r = sub.add_parser("reachset", help="compute reachable-set masks and dump them as CSV")
    _common(r)
    t = sub.add_parser("train", help="train the per-step value nets and save checkpoints")
    _common(t)
    ro = sub.add_parser("rollout", help="roll a trained policy forward and write the trajectory CSV")
    _common(ro)
    ro.add_argument("--policy", required=True, help="directory written by 'train'")
    b = sub.add_parser("baseline", help="fixed-demand DP baseline trajectory CSV")
    _common(b)
    c = sub.add_parser("compare", help="both strategies, report, trajectories and figure")
    _common(c)
    c.add_argument("--no-plots", action="store_true")
    return ap


def _load(args):
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "cycle", None):
        over["cycle"] = args.cycle
    if args.cache:
        over["cache_dir"] = args.cache
    return cfg.with_overrides(**over) if over else cfg


def _trace(cfg) -> DemandTrace:
    if not cfg.cycle:
        raise ConfigError("no drive cycle given (use --cycle or the 'cycle' key)")
    trace = load_cycle_csv(cfg.cycle, cfg.model_params().vehicle)
    if abs(trace.dt - cfg.dt) > 1e-6:
        raise ConfigError(f"cycle spacing {trace.dt} s differs from dt = {cfg.dt} s")
    return trace


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_gen_cycle(args, cfg) -> None:
    spec = SyntheticCycleSpec(kind=args.kind, duration=args.duration, v_max=args.v_max, dt=cfg.dt,
                              accel=args.accel, seed=cfg.seed)
    out = _out(args, f"{args.kind}.csv")
    write_cycle_csv(generate_cycle(spec, cfg.model_params().vehicle), out)
    print(f"wrote {out}")


def cmd_reachset(args, cfg) -> None:
    reach = reachable_for(cfg, _trace(cfg))
    out = _out(args, "reach.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    reach.to_csv(out)
    counts = reach.masks.reshape(len(reach.masks), -1).sum(axis=1)
    print(f"wrote {out}  steps = {reach.n_steps}  cells(k=0) = {counts[0]}  min cells = {counts.min()}")


def cmd_train(args, cfg) -> None:
    trace = _trace(cfg)
    policy = train_for(cfg, trace, reachable_for(cfg, trace))
    out = _out(args, "policy")
    policy.save(out)
    (out / "config.txt").write_text(dump_config(cfg))
    print(f"wrote {out}  steps = {policy.n_steps}")


def cmd_rollout(args, cfg) -> None:
    trace = _trace(cfg)
    policy = ValuePolicy.load(args.policy)
    if policy.n_steps != trace.n_steps:
        raise ConfigError(f"policy covers {policy.n_steps} steps, cycle has {trace.n_steps}")
    out = _out(args, "flexible_trajectory.csv")
    try:
        traj = rollout(cfg.x0, policy, trace, cfg.input_grid(), cfg.model_params(), cfg.state_box())
    except RolloutStuck as exc:
        exc.partial.to_csv(out.with_suffix(".partial.csv"))
        raise
    traj.to_csv(out)
    print(f"wrote {out}  fuel_g = {traj.total_fuel:.6f}")


def cmd_baseline(args, cfg) -> None:
    traj = baseline_for(cfg, _trace(cfg))
    out = _out(args, "baseline_trajectory.csv")
    traj.to_csv(out)
    print(f"wrote {out}  fuel_g = {traj.total_fuel:.6f}")


def cmd_compare(args, cfg) -> None:
    trace = _trace(cfg)
    out = _out(args, cfg.out_dir)
    res = run_compare(cfg, trace, out, Path(cfg.cycle).stem, plots=not args.no_plots)
    sys.stdout.write(res.report)


COMMANDS = {
    "gen-cycle": cmd_gen_cycle,
    "reachset": cmd_reachset,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "baseline": cmd_baseline,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = _load(args)
        COMMANDS[args.command](args, cfg)
    except Exception as exc:
        code = exit_code_for(exc)
        print(f"flexhev {args.command}: error: {exc}", file=sys.stderr)
        return code
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
