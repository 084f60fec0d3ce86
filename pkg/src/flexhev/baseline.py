"""Fixed-demand baseline: exact tabular DP over SoC alone, and fuel compensation.

With the driveline torque pinned to the upper-level request (dTd = 0, dx = dv = 0),
battery power depends only on (k, omega_e), so the SoC increment per input is
known up front and the backward pass is a vectorised min over an (soc, omega)
table with linear interpolation of the next value function.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adp import TerminalPenalty, Trajectory, penalty_components
from .dynamics import ControlInput, DemandTrace, DeviationState, step, transition
from .powertrain import ModelParams
from .reachable import ConfigurationError


class InfeasibleCycle(RuntimeError):
    def __init__(self, msg: str, k: int | None = None):
        super().__init__(msg)
        self.k = k


@dataclass(frozen=True)
class SocGrid:
    lo: float = 0.5
    hi: float = 0.7
    n: int = 401

    def __post_init__(self):
        if not (self.lo < self.hi and self.n >= 2):
            raise ValueError("SoC grid needs lo < hi and at least two nodes")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)


@dataclass
class BaselineResult:
    trajectory: Trajectory
    values: np.ndarray  # (N+1, n_soc) cost-to-go on the SoC nodes
    soc_grid: SocGrid
    omega: np.ndarray


def interp_values(values: np.ndarray, grid: SocGrid, soc) -> np.ndarray:
    """Linear interpolation of node values; +inf outside the grid or next to an infinite node."""
    soc = np.asarray(soc, dtype=float)
    n = grid.n
    soc = np.where(np.isfinite(soc), soc, grid.lo - 1.0)
    pos = (soc - grid.lo) / (grid.hi - grid.lo) * (n - 1)
    tol = 1e-9
    outside = (pos < -tol) | (pos > n - 1 + tol)
    pos = np.clip(pos, 0.0, n - 1)
    i = np.minimum(np.floor(pos).astype(int), n - 2)
    w = pos - i
    va, vb = values[i], values[i + 1]
    with np.errstate(invalid="ignore"):
        mixed = (1.0 - w) * va + w * vb
    out = np.where(w <= 0.0, va, np.where(w >= 1.0, vb, mixed))
    return np.where(outside, np.inf, out)


def soc_terminal_cost(soc, penalty: TerminalPenalty | None) -> np.ndarray:
    """SoC part of the terminal penalty; +inf outside the terminal SoC range. None disables both."""
    soc = np.asarray(soc, dtype=float)
    if penalty is None:
        return np.zeros_like(soc)
    x = np.zeros(soc.shape + (3,))
    x[..., 2] = soc
    c = penalty_components(x, penalty)[..., 2]
    return np.where((soc < penalty.xmin[2]) | (soc > penalty.xmax[2]), np.inf, c)


def step_tables(trace: DemandTrace, omega, params: ModelParams):
    """Per-step SoC increment, fuel increment and feasibility for every omega: (N, n_omega) each."""
    N = trace.n_steps
    omega = np.asarray(omega, dtype=float)
    dsoc = np.empty((N, omega.size))
    fuel = np.empty((N, omega.size))
    ok = np.empty((N, omega.size), dtype=bool)
    for k in range(N):
        tr = transition(0.0, 0.0, 0.0, omega, 0.0, k, trace, params)
        dsoc[k], fuel[k], ok[k] = tr.soc, trace.dt * tr.fuel, tr.ok
    return dsoc, fuel, ok


def _check_omega(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if omega.ndim != 1 or omega.size == 0 or np.any(np.diff(omega) <= 0):
        raise ValueError("engine speed grid must be strictly increasing")
    return omega


def _backward(dsoc, fuel, ok, penalty, soc_grid: SocGrid) -> np.ndarray:
    s = soc_grid.nodes
    N = dsoc.shape[0]
    values = np.empty((N + 1, s.size))
    values[N] = soc_terminal_cost(s, penalty)
    for k in range(N - 1, -1, -1):
        nxt = s[:, None] + dsoc[k][None, :]
        q = np.where(ok[k], fuel[k], np.inf) + interp_values(values[k + 1], soc_grid, nxt)
        values[k] = q.min(axis=1)
    return values


def soc_value_table(trace: DemandTrace, omega, params: ModelParams,
                    penalty: TerminalPenalty | None = TerminalPenalty(), soc_grid: SocGrid = SocGrid()) -> np.ndarray:
    """Fixed-demand cost-to-go on the SoC nodes, (N+1, n_soc); +inf where the terminal range is out of reach.

    Unlike ``baseline_fixed_demand`` this never raises on an undeliverable step:
    such a step simply makes every earlier value infinite.
    """
    dsoc, fuel, ok = step_tables(trace, _check_omega(omega), params)
    return _backward(dsoc, fuel, ok, penalty, soc_grid)


def baseline_fixed_demand(trace: DemandTrace, omega, params: ModelParams,
                          penalty: TerminalPenalty | None = TerminalPenalty(),
                          soc_grid: SocGrid = SocGrid(), soc0: float = 0.6) -> BaselineResult:
    """Backward DP over SoC nodes with dTd = 0, then a forward greedy rollout from ``soc0``.

    ``omega`` must be sorted ascending; ties go to the lowest engine speed.
    """
    omega = _check_omega(omega)
    N = trace.n_steps
    dsoc, fuel, ok = step_tables(trace, omega, params)
    bad = np.flatnonzero(~ok.any(axis=1))
    if bad.size:
        raise InfeasibleCycle(f"step {bad[0]}: no engine speed covers the power demand", int(bad[0]))
    values = _backward(dsoc, fuel, ok, penalty, soc_grid)

    x = DeviationState(0.0, 0.0, float(soc0))
    states, us, pb, pe, fr = [x], [], [], [], []
    for k in range(N):
        q = np.where(ok[k], fuel[k], np.inf) + interp_values(values[k + 1], soc_grid, x.soc + dsoc[k])
        j = int(np.argmin(q))
        if not np.isfinite(q[j]):
            raise InfeasibleCycle(f"step {k}: terminal SoC range unreachable from SoC {x.soc:.4f}", k)
        u = ControlInput(float(omega[j]), 0.0)
        tr = transition(*x, *u, k, trace, params)
        x = step(x, u, k, trace, params)
        states.append(x)
        us.append(tuple(u))
        pb.append(float(tr.p_batt))
        pe.append(float(tr.p_e))
        fr.append(float(tr.fuel))
    traj = Trajectory(trace.t.copy(), np.array(states), np.array(us).reshape(-1, 2), np.array(pb),
                      np.array(pe), np.array(fr), trace.dt)
    return BaselineResult(traj, values, soc_grid, omega)


def compensated_fuel(traj_or_fuel, kappa: float, soc_final: float | None = None, soc_desired: float = 0.6) -> float:
    """Fuel minus kappa times the terminal SoC surplus (g)."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if isinstance(traj_or_fuel, Trajectory):
        fuel, soc_final = traj_or_fuel.total_fuel, float(traj_or_fuel.states[-1, 2])
    else:
        fuel = float(traj_or_fuel)
        if soc_final is None:
            raise ValueError("soc_final required with a scalar fuel value")
    return fuel - kappa * (soc_final - soc_desired)


def target_penalty(target: float, spread: float = 0.03, gamma: float = 100.0) -> TerminalPenalty:
    """Penalty whose SoC band collapses onto ``target``."""
    return TerminalPenalty(low=(-0.5, -0.5, target), high=(0.5, 0.5, target),
                           xmin=(-2.0, -1.5, target - spread), xmax=(2.0, 1.5, target + spread), gamma=gamma)


def estimate_kappa(trace: DemandTrace, omega, params: ModelParams, targets=(0.57, 0.60, 0.63),
                   soc_grid: SocGrid = SocGrid(), soc0: float = 0.6, spread: float = 0.03,
                   gamma: float = 100.0) -> tuple[float, np.ndarray, np.ndarray]:
    """Slope magnitude of baseline fuel against terminal SoC over several targets.

    Returns (kappa, terminal_socs, fuels).
    """
    targets = np.asarray(targets, dtype=float)
    if targets.size < 2 or np.unique(targets).size < 2:
        raise ConfigurationError("need at least two distinct terminal SoC targets")
    socs, fuels = [], []
    for tgt in targets:
        traj = baseline_fixed_demand(trace, omega, params, target_penalty(tgt, spread, gamma), soc_grid, soc0).trajectory
        socs.append(traj.states[-1, 2])
        fuels.append(traj.total_fuel)
    socs, fuels = np.array(socs), np.array(fuels)
    if np.ptp(socs) < 1e-9:
        raise ConfigurationError("baseline runs ended at the same SoC; targets too close")
    slope = np.polyfit(socs, fuels, 1)[0]
    return float(abs(slope)), socs, fuels
