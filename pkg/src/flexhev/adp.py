"""Approximate dynamic programming trained inside the reachable sets.

Backward in time, each step k gets a network phi_k fitted to Bellman targets

    V_k(X) = min_U  dt * fuel(U) + phi_{k+1}(X + dt * F(X, U))

evaluated by exhaustive search over the input grid on states sampled from the
reachable set R(k); phi_N is fitted to the terminal penalty.  A rollout then
picks the same argmin forward in time from a given initial state.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import ControlInput, DeviationState, DemandTrace, StateBox, step, transition
from .powertrain import ModelParams
from .reachable import InfeasibleProblem, InputGrid, ReachableSet
from .valuenet import TrainingConfig, TrainingDiverged, ValueNet, train

log = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["k", "t", "dx", "dv", "soc", "omega_e", "dTd", "P_batt", "P_e", "fuel_rate", "fuel_cum"]


class InfeasibleSample(RuntimeError):
    """No grid input keeps the successor inside the next reachable set."""


class RolloutStuck(RuntimeError):
    def __init__(self, msg: str, k: int, partial: "Trajectory"):
        super().__init__(msg)
        self.k = k
        self.partial = partial


@dataclass(frozen=True)
class TerminalPenalty:
    """Piecewise-linear terminal cost; zero on [low, high], rising to ``gamma`` at [xmin, xmax].

    Per-dimension order is (dx, dv, soc).  Outside [xmin, xmax] the cost is ``gamma``.
    """

    low: tuple = (-0.5, -0.5, 0.59)
    high: tuple = (0.5, 0.5, 0.63)
    xmin: tuple = (-2.0, -1.5, 0.53)
    xmax: tuple = (2.0, 1.5, 0.67)
    gamma: float = 100.0  # g fuel-equivalent

    def __post_init__(self):
        lo, hi, mn, mx = (np.asarray(a, dtype=float) for a in (self.low, self.high, self.xmin, self.xmax))
        if not all(a.shape == (3,) for a in (lo, hi, mn, mx)):
            raise ValueError("terminal penalty bounds need one entry per state dimension")
        if not (np.all(mn <= lo) and np.all(lo <= hi) and np.all(hi <= mx)):
            raise ValueError("need xmin <= low <= high <= xmax in every dimension")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        for name, a in zip(("low", "high", "xmin", "xmax"), (lo, hi, mn, mx)):
            object.__setattr__(self, name, tuple(float(x) for x in a))


def penalty_components(states, cfg: TerminalPenalty) -> np.ndarray:
    """Per-dimension costs c_i, shape (..., 3)."""
    x = np.asarray(states, dtype=float)
    lo, hi = np.array(cfg.low), np.array(cfg.high)
    mn, mx = np.array(cfg.xmin), np.array(cfg.xmax)
    with np.errstate(divide="ignore", invalid="ignore"):
        below = cfg.gamma * (lo - x) / (lo - mn)
        above = cfg.gamma * (x - hi) / (mx - hi)
    c = np.where(x < lo, below, np.where(x > hi, above, 0.0))
    return np.where((x < mn) | (x > mx), cfg.gamma, c)


def terminal_penalty(states, cfg: TerminalPenalty = TerminalPenalty()):
    """max_i c_i(x_i) for one state (3,) or many (..., 3)."""
    out = penalty_components(states, cfg).max(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class Trajectory:
    """States k = 0..N, inputs and powers k = 0..N-1, cumulative fuel k = 0..N."""

    t: np.ndarray
    states: np.ndarray  # (N+1, 3)
    inputs: np.ndarray  # (N, 2)
    p_batt: np.ndarray
    p_e: np.ndarray
    fuel_rate: np.ndarray
    dt: float

    @property
    def n_steps(self) -> int:
        return len(self.inputs)

    @property
    def fuel_cum(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dt * self.fuel_rate)])

    @property
    def total_fuel(self) -> float:
        return float(self.fuel_cum[-1])

    @property
    def terminal(self) -> DeviationState:
        return DeviationState(*map(float, self.states[-1]))

    def cost(self, penalty: TerminalPenalty) -> float:
        """Fuel plus terminal penalty, the objective the optimiser minimises."""
        return self.total_fuel + terminal_penalty(self.states[-1], penalty)

    def to_csv(self, path) -> None:
        cum = self.fuel_cum
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_COLUMNS)
            for k in range(len(self.states)):
                row = [k, f"{self.t[k]:.6f}", *(f"{x:.12g}" for x in self.states[k])]
                if k < self.n_steps:
                    row += [f"{x:.12g}" for x in (*self.inputs[k], self.p_batt[k], self.p_e[k], self.fuel_rate[k])]
                else:
                    row += ["", "", "", "", ""]
                row.append(f"{cum[k]:.12g}")
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(Path(path), newline="") as fh:
            rows = list(csv.DictReader(fh))
        t = np.array([float(r["t"]) for r in rows])
        states = np.array([[float(r[c]) for c in ("dx", "dv", "soc")] for r in rows])
        body = rows[:-1]
        get = lambda c: np.array([float(r[c]) for r in body])  # noqa: E731
        dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
        return cls(t, states, np.stack([get("omega_e"), get("dTd")], axis=-1).reshape(-1, 2),
                   get("P_batt"), get("P_e"), get("fuel_rate"), dt)


def _empty_trajectory(x0, trace: DemandTrace) -> Trajectory:
    return Trajectory(trace.t[:1].copy(), np.array([x0], dtype=float), np.zeros((0, 2)),
                      np.zeros(0), np.zeros(0), np.zeros(0), trace.dt)


def candidate_costs(states, k: int, phi_next, inputs: InputGrid, trace: DemandTrace, params: ModelParams,
                    reach: ReachableSet, box: StateBox):
    """Cost dt*fuel + phi_{k+1}(successor) of every grid input, shape (h, n_inputs).

    Columns follow ``inputs.ordered()``; inadmissible inputs cost +inf.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    U = inputs.ordered()
    tr = transition(X[:, 0:1], X[:, 1:2], X[:, 2:3], U[None, :, 0], U[None, :, 1], k, trace, params)
    succ = np.stack([tr.dx, tr.dv, tr.soc], axis=-1)
    ok = tr.ok & box.contains(tr.dx, tr.dv, tr.soc) & reach.contains(k + 1, succ)
    cost = np.full(ok.shape, np.inf)
    if ok.any():
        cost[ok] = trace.dt * tr.fuel[ok] + phi_next(succ[ok])
    return cost, U


def has_admissible_input(state, k: int, inputs: InputGrid, trace: DemandTrace, params: ModelParams,
                         reach: ReachableSet, box: StateBox) -> bool:
    """True when some grid input moves ``state`` into R(k+1) at step k."""
    U = inputs.ordered()
    tr = transition(state[0], state[1], state[2], U[:, 0], U[:, 1], k, trace, params)
    succ = np.stack([tr.dx, tr.dv, tr.soc], axis=-1)
    return bool(np.any(tr.ok & box.contains(tr.dx, tr.dv, tr.soc) & reach.contains(k + 1, succ)))


def bellman_targets(states, k: int, phi_next, inputs: InputGrid, trace: DemandTrace, params: ModelParams,
                    reach: ReachableSet, box: StateBox):
    """Vectorised Bellman minimisation for many states at step k.

    Returns ``(value, u_star, feasible)``; value is +inf and u_star NaN where no input
    keeps the successor inside R(k+1).  Ties resolve to the earliest input in
    ``inputs.ordered()`` (lowest engine speed, then smallest |dTd|, then lowest dTd).
    """
    cost, U = candidate_costs(states, k, phi_next, inputs, trace, params, reach, box)
    best = np.argmin(cost, axis=1)
    value = cost[np.arange(len(cost)), best]
    feasible = np.isfinite(value)
    u_star = np.where(feasible[:, None], U[best], np.nan)
    return value, u_star, feasible


def bellman_target(state, k: int, phi_next, inputs: InputGrid, trace: DemandTrace, params: ModelParams,
                   reach: ReachableSet, box: StateBox) -> tuple[float, ControlInput]:
    """Single-state Bellman target; raises InfeasibleSample when no input is admissible."""
    value, u, ok = bellman_targets(np.asarray(state, dtype=float)[None], k, phi_next, inputs, trace,
                                   params, reach, box)
    if not ok[0]:
        raise InfeasibleSample(f"step {k}: no admissible input from {tuple(state)}")
    return float(value[0]), ControlInput(*map(float, u[0]))


@dataclass
class SocPrior:
    """Per-step cost-to-go table over SoC alone, interpolated linearly.

    Used as a fixed offset under the value nets: the nets then fit only the
    correction for the deviation states and the extra input freedom.  Infinite
    table entries (SoC levels that cannot reach the terminal range) are replaced
    by the nearest finite value so the offset stays finite everywhere.
    """

    soc: np.ndarray  # (n,) nodes, increasing
    values: np.ndarray  # (N+1, n)

    def __post_init__(self):
        self.soc = np.asarray(self.soc, dtype=float)
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != self.soc.size or np.any(np.diff(self.soc) <= 0):
            raise ValueError("prior needs increasing SoC nodes and an (N+1, n) table")
        for row in v:
            ok = np.isfinite(row)
            row[:] = np.interp(self.soc, self.soc[ok], row[ok]) if ok.any() else 0.0
        self.values = v

    def __call__(self, k: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.interp(x[..., 2], self.soc, self.values[k])


@dataclass
class ValuePolicy:
    """phi_0..phi_N plus the reachable set they were trained in.

    With ``penalty`` set, the terminal cost itself stands in for phi_N wherever the
    value at step N is needed; phi_N is still fitted and kept for inspection.
    With ``log_targets`` the nets hold log(1 + V) and values are mapped back.
    With a ``prior`` the nets hold V minus the prior and the two are summed.
    """

    nets: list
    reach: ReachableSet
    meta: dict = field(default_factory=dict)
    penalty: TerminalPenalty | None = None
    log_targets: bool = False
    prior: SocPrior | None = None

    def __post_init__(self):
        if self.log_targets and self.prior is not None:
            raise ValueError("log targets and a value prior cannot be combined")

    @property
    def n_steps(self) -> int:
        return len(self.nets) - 1

    def value_fn(self, k: int):
        if k == self.n_steps and self.penalty is not None:
            return lambda x: terminal_penalty(x, self.penalty)
        net = self.nets[k]
        if self.log_targets:
            return lambda x: np.expm1(net.forward(x))
        if self.prior is not None:
            prior = self.prior
            return lambda x: prior(k, x) + net.forward(x)
        return net

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, net in enumerate(self.nets):
            net.save(d / f"phi_{k:05d}.npz")
        self.reach.save(d / "reach.npz")
        if self.prior is not None:
            np.savez(d / "prior.npz", soc=self.prior.soc, values=self.prior.values)
        meta = dict(self.meta, terminal_penalty=None if self.penalty is None else asdict(self.penalty),
                    log_targets=self.log_targets)
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "ValuePolicy":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        nets = [ValueNet.load(d / f"phi_{k:05d}.npz") for k in range(meta["n_steps"] + 1)]
        pen = meta.pop("terminal_penalty", None)
        log_targets = bool(meta.pop("log_targets", False))
        prior = None
        if (d / "prior.npz").exists():
            with np.load(d / "prior.npz") as z:
                prior = SocPrior(z["soc"], z["values"])
        return cls(nets, ReachableSet.load(d / "reach.npz"), meta, None if pen is None else TerminalPenalty(**pen),
                   log_targets, prior)


def train_policy(trace: DemandTrace, reach: ReachableSet, inputs: InputGrid, params: ModelParams,
                 penalty: TerminalPenalty = TerminalPenalty(), config: TrainingConfig = TrainingConfig(),
                 box: StateBox | None = None, resample_rounds: int = 5,
                 exact_terminal: bool = True, log_targets: bool = False,
                 prior: SocPrior | None = None) -> ValuePolicy:
    """Fit phi_N..phi_0 backward in time on samples drawn from each reachable set.

    ``exact_terminal`` uses the terminal cost directly (not its fit) for the step
    N-1 targets and in later rollouts.  ``log_targets`` fits log(1 + V) instead of
    V: costs are non-negative and span from ~0 near the plan to ~gamma at the edge
    of the reachable set, and the log keeps the fit accurate where costs are small.
    ``prior`` is a fixed SoC-only cost-to-go the nets are fitted on top of.
    """
    box = reach.grid.box if box is None else box
    N = trace.n_steps
    if reach.n_steps != N:
        raise ValueError(f"reachable set covers {reach.n_steps} steps, trace has {N}")
    nets: list = [None] * (N + 1)
    policy = ValuePolicy(nets, reach, {}, penalty if exact_terminal else None, log_targets, prior)
    if prior is not None and prior.values.shape[0] != N + 1:
        raise ValueError(f"prior covers {prior.values.shape[0] - 1} steps, trace has {N}")
    losses, iters, dropped = [0.0] * (N + 1), [0] * (N + 1), [0] * (N + 1)
    spread = [0.0] * (N + 1)
    for k in range(N, -1, -1):
        rng = np.random.default_rng([config.seed, k])
        if not reach.masks[k].any():
            raise InfeasibleProblem(f"reachable set at step {k} is empty", k)
        X = reach.sample(k, config.samples, rng)
        if k == N:
            y = terminal_penalty(X, penalty)
        else:
            y, _, ok = bellman_targets(X, k, policy.value_fn(k + 1), inputs, trace, params, reach, box)
            for _ in range(resample_rounds):
                if ok.all():
                    break
                bad = ~ok
                X[bad] = reach.sample(k, int(bad.sum()), rng)
                y[bad], _, ok[bad] = bellman_targets(X[bad], k, policy.value_fn(k + 1), inputs, trace, params, reach, box)
            if not ok.all():
                log.info("step %d: dropped %d samples with no admissible input", k, int((~ok).sum()))
                dropped[k] = int((~ok).sum())
                X, y = X[ok], y[ok]
            if len(y) == 0:
                raise InfeasibleProblem(f"no admissible training sample at step {k}", k)
        if log_targets:
            y = np.log1p(np.maximum(y, 0.0))  # true costs are >= 0; clip fit undershoot
        elif prior is not None:
            y = y - prior(k, X)
        spread[k] = float(np.std(y))
        probe = reach.sample(k, config.probe_size, rng)
        net0 = ValueNet.initialize(reach.grid.lo, reach.grid.hi, config.hidden, rng)
        try:
            net, res = train(net0, X, y, config, probe, rng)
        except TrainingDiverged as exc:
            exc.step = k
            raise
        nets[k] = net
        losses[k], iters[k] = res.loss, res.iterations
        log.debug("step %d: mse %.4g after %d iterations", k, res.loss, res.iterations)
    meta = {"n_steps": N, "losses": losses, "iterations": iters, "dropped": dropped, "target_std": spread,
            "samples": config.samples, "seed": config.seed, "config": asdict(config),
            "log_targets": log_targets, "prior": prior is not None}
    policy.meta = meta
    return policy


def rollout(x0, policy: ValuePolicy, trace: DemandTrace, inputs: InputGrid, params: ModelParams,
            box: StateBox | None = None, max_backtracks: int = 10000) -> Trajectory:
    """Greedy forward pass: at each k take the Bellman argmin against phi_{k+1}.

    The reachable masks are judged at cell centres, so an off-centre state can
    have no admissible input.  Inputs whose successor is such a dead end are
    skipped in favour of the next-cheapest one, and if a step runs out of inputs
    the search steps back (depth-first, cheapest first); ``max_backtracks`` bounds
    the extra work before giving up.
    """
    reach = policy.reach
    box = reach.grid.box if box is None else box
    N = trace.n_steps
    x = DeviationState(*map(float, x0))
    if N == 0:
        return _empty_trajectory(x, trace)
    if not reach.contains(0, x):
        raise InfeasibleProblem(f"initial state {tuple(x)} is outside the reachable set", 0)

    states, taken = [x], []
    options: list = []  # per step: untried admissible inputs, cheapest first
    deepest = ([x], [])
    backtracks = 0
    while len(taken) < N:
        k = len(taken)
        if len(options) == k:
            cost, U = candidate_costs(np.array([states[-1]]), k, policy.value_fn(k + 1), inputs, trace,
                                      params, reach, box)
            order = np.argsort(cost[0], kind="stable")
            options.append([ControlInput(*map(float, U[j])) for j in order if np.isfinite(cost[0, j])])
        if options[k]:
            u = options[k].pop(0)
            nxt = step(states[-1], u, k, trace, params, box)
            if k + 1 < N and not has_admissible_input(nxt, k + 1, inputs, trace, params, reach, box):
                continue
            states.append(nxt)
            taken.append(u)
            if len(taken) > len(deepest[1]):
                deepest = (list(states), list(taken))
            continue
        if k == 0 or backtracks >= max_backtracks:
            n = len(deepest[1])
            raise RolloutStuck(f"step {n}: no admissible input from {tuple(deepest[0][-1])}", n,
                               _record(x, deepest[1], trace, params))
        backtracks += 1
        options.pop()
        states.pop()
        taken.pop()
    if backtracks:
        log.info("rollout needed %d backtracks", backtracks)
    return _record(x, taken, trace, params)


def _record(x0: DeviationState, us, trace: DemandTrace, params: ModelParams) -> Trajectory:
    """Re-step an input sequence and collect powers and fuel along the way."""
    states, pb, pe, fr = [x0], [], [], []
    for k, u in enumerate(us):
        tr = transition(*states[-1], *u, k, trace, params)
        states.append(step(states[-1], u, k, trace, params))
        pb.append(float(tr.p_batt))
        pe.append(float(tr.p_e))
        fr.append(float(tr.fuel))
    n = len(us)
    return Trajectory(trace.t[: n + 1].copy(), np.array(states), np.array(us, dtype=float).reshape(-1, 2),
                      np.array(pb), np.array(pe), np.array(fr), trace.dt)
