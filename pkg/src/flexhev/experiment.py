"""End-to-end comparison: reachable sets, training, rollouts, baseline, compensation, report."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adp import RolloutStuck, SocPrior, Trajectory, ValuePolicy, rollout, train_policy
from .baseline import baseline_fixed_demand, compensated_fuel, estimate_kappa, soc_value_table
from .config import ExperimentConfig, dump_config
from .dynamics import DemandTrace
from .reachable import ReachableSet, cached_reachable_set, compute_reachable_set

log = logging.getLogger(__name__)


class StageFailure(RuntimeError):
    """Wraps the error raised inside one pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class CompareResult:
    flex: Trajectory
    baseline: Trajectory
    kappa: float
    flex_comp: float
    baseline_comp: float
    report: str

    @property
    def improvement_pct(self) -> float:
        return 100.0 * (self.baseline_comp - self.flex_comp) / self.baseline_comp


def reachable_for(cfg: ExperimentConfig, trace: DemandTrace, cache_dir=None) -> ReachableSet:
    params, grid, inputs, pen = cfg.model_params(), cfg.state_grid(), cfg.input_grid(), cfg.penalty()
    cache_dir = cache_dir or cfg.cache_dir or None
    if cache_dir:
        return cached_reachable_set(cache_dir, trace, grid, inputs, params, pen.xmin, pen.xmax)
    return compute_reachable_set(trace, grid, inputs, params, pen.xmin, pen.xmax)


def prior_for(cfg: ExperimentConfig, trace: DemandTrace) -> SocPrior | None:
    if not cfg.value_prior:
        return None
    grid = cfg.soc_grid()
    values = soc_value_table(trace, np.array(cfg.input_grid().omega_e), cfg.model_params(), cfg.penalty(), grid)
    return SocPrior(grid.nodes, values)


def train_for(cfg: ExperimentConfig, trace: DemandTrace, reach: ReachableSet) -> ValuePolicy:
    return train_policy(trace, reach, cfg.input_grid(), cfg.model_params(), cfg.penalty(), cfg.training(),
                        cfg.state_box(), exact_terminal=cfg.exact_terminal, log_targets=cfg.log_targets,
                        prior=prior_for(cfg, trace))


def baseline_for(cfg: ExperimentConfig, trace: DemandTrace) -> Trajectory:
    omega = np.array(cfg.input_grid().omega_e)
    return baseline_fixed_demand(trace, omega, cfg.model_params(), cfg.penalty(), cfg.soc_grid(), cfg.soc0).trajectory


def kappa_for(cfg: ExperimentConfig, trace: DemandTrace) -> float:
    if cfg.kappa >= 0:
        return cfg.kappa
    targets = (cfg.soc0 - cfg.kappa_spread, cfg.soc0, cfg.soc0 + cfg.kappa_spread)
    kappa, _, _ = estimate_kappa(trace, np.array(cfg.input_grid().omega_e), cfg.model_params(), targets,
                                 cfg.soc_grid(), cfg.soc0, gamma=cfg.gamma_pen)
    return kappa


def _in_box(x, lo, hi) -> bool:
    return bool(np.all((np.asarray(x) >= np.asarray(lo)) & (np.asarray(x) <= np.asarray(hi))))


def format_report(cfg: ExperimentConfig, trace: DemandTrace, flex: Trajectory, base: Trajectory,
                  kappa: float, cycle_name: str = "") -> tuple[str, float, float]:
    pen = cfg.penalty()
    fc = compensated_fuel(flex, kappa, soc_desired=cfg.soc0)
    bc = compensated_fuel(base, kappa, soc_desired=cfg.soc0)
    rows = [
        ("cycle", cycle_name or "-"),
        ("n_steps", trace.n_steps),
        ("dt_s", f"{trace.dt:.6f}"),
        ("soc0", f"{cfg.soc0:.6f}"),
        ("seed", cfg.seed),
        ("kappa_g_per_soc", f"{kappa:.6f}"),
    ]
    for name, tr, comp in (("flexible", flex, fc), ("baseline", base, bc)):
        x = tr.states[-1]
        rows += [
            (f"{name}.terminal_dx_m", f"{x[0]:.6f}"),
            (f"{name}.terminal_dv_mps", f"{x[1]:.6f}"),
            (f"{name}.terminal_soc_pct", f"{100 * x[2]:.6f}"),
            (f"{name}.fuel_g", f"{tr.total_fuel:.6f}"),
            (f"{name}.fuel_comp_g", f"{comp:.6f}"),
            (f"{name}.terminal_in_box", str(_in_box(x, pen.xmin, pen.xmax)).lower()),
        ]
    rows.append(("improvement_pct", f"{100.0 * (bc - fc) / bc:.6f}" if bc != 0 else "nan"))
    width = max(len(k) for k, _ in rows)
    return "".join(f"{k:<{width}} = {v}\n" for k, v in rows), fc, bc


def run_compare(cfg: ExperimentConfig, trace: DemandTrace, out_dir=None, cycle_name: str = "",
                cache_dir=None, plots: bool = True) -> CompareResult:
    """Both strategies on one cycle; writes config, trajectories, report and figure to ``out_dir``."""
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))

    def stage(name, fn, *a, **kw):
        try:
            return fn(*a, **kw)
        except Exception as exc:  # propagate with the stage attached
            raise StageFailure(name, exc) from exc

    params = cfg.model_params()
    reach = stage("reachset", reachable_for, cfg, trace, cache_dir)
    base = stage("baseline", baseline_for, cfg, trace)
    if out:
        base.to_csv(out / "baseline_trajectory.csv")
    policy = stage("train", train_for, cfg, trace, reach)
    try:
        flex = stage("rollout", rollout, cfg.x0, policy, trace, cfg.input_grid(), params, cfg.state_box())
    except StageFailure as exc:
        if out and isinstance(exc.cause, RolloutStuck):
            exc.cause.partial.to_csv(out / "flexible_trajectory.partial.csv")
        raise
    kappa = stage("kappa", kappa_for, cfg, trace)
    report, fc, bc = format_report(cfg, trace, flex, base, kappa, cycle_name)
    if out:
        flex.to_csv(out / "flexible_trajectory.csv")
        (out / "report.txt").write_text(report)
        if plots:
            from .plotting import plot_comparison

            plot_comparison(trace, flex, base, out / "comparison.png")
    return CompareResult(flex, base, kappa, fc, bc, report)
