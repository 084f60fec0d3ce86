"""Independent reference implementations used to freeze expected values.

These deliberately avoid the package's vectorised paths: successors are computed
through the per-machine operating point and the scalar SoC derivative, cell
indices by a separate floor-based routine, and reachability / optimal cost by
plain memoised enumeration over the cell graph.
"""
from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np

from flexhev.powertrain import battery_power, max_battery_power, operating_point, soc_derivative


def successor(state, u, k, trace, params):
    """Exact Euler successor of one state under one input, or None when undeliverable."""
    dx, dv, soc = state
    w, dT = u
    veh = params.vehicle
    v = float(trace.v[k])
    if v + dv < 0:
        return None
    op = operating_point(v + dv, w, float(trace.Td[k]) + dT, veh, params.powertrain, params.omega_max)
    p = battery_power(op, params.powertrain)
    if p > max_battery_power(params.battery):
        return None
    sd = soc_derivative(p, params.battery)
    drag = 0.5 * veh.rho * veh.C_drag * veh.A_f
    acc = (-drag * dv * (2 * v + dv) + dT / veh.r) / veh.m
    dt = trace.dt
    return (dx + dt * dv, dv + dt * acc, soc + dt * sd)


def fuel_increment(u, trace, params):
    return trace.dt * float(params.fuel_map(u[0]))


def cell_of(x, lo, hi, n):
    """Cell index per dimension (faces to the lower cell), or None outside the closed box."""
    idx = []
    for xi, a, b, m in zip(x, lo, hi, n):
        if not (a <= xi <= b):
            return None
        q = (xi - a) / ((b - a) / m)
        i = math.floor(q)
        if i == q and i > 0:
            i -= 1
        idx.append(min(i, m - 1))
    return tuple(idx)


def centers(lo, hi, n):
    return [np.array([a + (i + 0.5) * (b - a) / m for i in range(m)]) for a, b, m in zip(lo, hi, n)]


def all_cells(n):
    return list(itertools.product(*(range(m) for m in n)))


def center_of(cell, lo, hi, n):
    return tuple(a + (i + 0.5) * (b - a) / m for i, a, b, m in zip(cell, lo, hi, n))


def inputs_of(input_grid):
    """Grid inputs in tie-break order: omega asc, |dTd| asc, dTd asc."""
    t = sorted(input_grid.dTd, key=lambda x: (abs(x), x))
    return [(w, d) for w in sorted(input_grid.omega_e) for d in t]


class CellGraph:
    """Successor cell of every (step, cell centre, input); None where the transition fails."""

    def __init__(self, trace, lo, hi, n, input_grid, params):
        self.lo, self.hi, self.n = tuple(lo), tuple(hi), tuple(n)
        self.inputs = inputs_of(input_grid)
        self.N = trace.n_steps
        self.trace, self.params = trace, params
        self.succ = {}
        for k in range(self.N):
            for c in all_cells(self.n):
                x = center_of(c, self.lo, self.hi, self.n)
                for u in self.inputs:
                    nxt = successor(x, u, k, trace, params)
                    self.succ[k, c, u] = None if nxt is None else cell_of(nxt, self.lo, self.hi, self.n)


def forward_reachability(graph: CellGraph, terminal_lo, terminal_hi):
    """(N+1, *n) masks: a cell is true iff some input sequence walks the cell graph into the terminal cells."""
    n, N = graph.n, graph.N

    def terminal(c):
        x = center_of(c, graph.lo, graph.hi, n)
        return all(a - 1e-12 <= xi <= b + 1e-12 for xi, a, b in zip(x, terminal_lo, terminal_hi))

    @lru_cache(maxsize=None)
    def reaches(k, c):
        if k == N:
            return terminal(c)
        return any(s is not None and reaches(k + 1, s) for s in (graph.succ[k, c, u] for u in graph.inputs))

    masks = np.zeros((N + 1, *n), dtype=bool)
    for k in range(N + 1):
        for c in all_cells(n):
            masks[(k, *c)] = reaches(k, c)
    return masks


def tabular_dp(graph: CellGraph, terminal_cost, reach_masks):
    """Optimal cost-to-go on the cell graph; successors restricted to reachable cells.

    ``terminal_cost(center)`` prices the final cell.  Returns dict (k, cell) -> value (inf if none).
    """
    n, N = graph.n, graph.N
    V = {}
    for c in all_cells(n):
        V[N, c] = terminal_cost(center_of(c, graph.lo, graph.hi, n)) if reach_masks[(N, *c)] else math.inf
    for k in range(N - 1, -1, -1):
        for c in all_cells(n):
            best = math.inf
            for u in graph.inputs:
                s = graph.succ[k, c, u]
                if s is None or not reach_masks[(k + 1, *s)]:
                    continue
                best = min(best, fuel_increment(u, graph.trace, graph.params) + V[k + 1, s])
            V[k, c] = best
    return V


def brute_force_baseline(trace, omega, params, soc0, terminal_cost):
    """Minimum of fuel + terminal_cost(soc_N) over every engine-speed sequence (dTd = 0)."""
    N = trace.n_steps
    best, best_seq = math.inf, None
    # per-step SoC increment and fuel for each omega, computed on the scalar path
    table = []
    for k in range(N):
        row = []
        for w in omega:
            nxt = successor((0.0, 0.0, 0.0), (w, 0.0), k, trace, params)
            row.append(None if nxt is None else (nxt[2], fuel_increment((w, 0.0), trace, params)))
        table.append(row)
    for seq in itertools.product(range(len(omega)), repeat=N):
        soc, fuel = soc0, 0.0
        for k, j in enumerate(seq):
            e = table[k][j]
            if e is None:
                break
            soc += e[0]
            fuel += e[1]
        else:
            cost = fuel + terminal_cost(soc)
            if cost < best:
                best, best_seq = cost, seq
    return best, best_seq


def successors_vec(X, U, k, trace, params):
    """Vectorised successor of states X (n, 3) under inputs U (m, 2): arrays (n, m, 3) and ok (n, m)."""
    veh, pt, batt = params.vehicle, params.powertrain, params.battery
    dx, dv, soc = (X[:, i:i + 1] for i in range(3))
    w, dT = U[None, :, 0], U[None, :, 1]
    v = float(trace.v[k])
    vf = v + dv
    rev = vf < 0
    op = operating_point(np.broadcast_to(np.maximum(vf, 0.0), np.broadcast_shapes(vf.shape, w.shape)),
                         np.broadcast_to(w, np.broadcast_shapes(vf.shape, w.shape)),
                         np.broadcast_to(float(trace.Td[k]) + dT, np.broadcast_shapes(vf.shape, w.shape)),
                         veh, pt, params.omega_max)
    p = battery_power(op, pt)
    ok = (p <= max_battery_power(batt)) & ~rev
    V, R, Q = batt.V_batt, batt.R_batt, batt.Q_batt
    rate = -(V - np.sqrt(np.maximum(V * V - 4 * R * p, 0.0))) / (2 * R * Q)
    drag = 0.5 * veh.rho * veh.C_drag * veh.A_f
    acc = (-drag * dv * (2 * v + dv) + dT / veh.r) / veh.m
    dt = trace.dt
    out = np.stack(np.broadcast_arrays(dx + dt * dv, dv + dt * acc, soc + dt * rate), axis=-1)
    return out, ok


class InterpolatedDP:
    """Tabular DP on cell-centre nodes with multilinear value interpolation.

    Successors must land in a true cell of the next mask (floor-based containment),
    matching the reachable-set semantics; the value there is interpolated from the
    eight surrounding nodes when they are all finite, else taken from the containing
    cell.  ``terminal_cost`` prices step N exactly at the successor point.
    """

    def __init__(self, trace, lo, hi, n, input_grid, params, masks, terminal_cost):
        self.lo, self.hi, self.n = np.asarray(lo, float), np.asarray(hi, float), tuple(n)
        self.w = (self.hi - self.lo) / np.array(n)
        self.trace, self.params, self.masks = trace, params, masks
        self.U = np.array(inputs_of(input_grid), dtype=float)
        self.terminal_cost = terminal_cost
        self.N = trace.n_steps
        self.axes = [self.lo[d] + (np.arange(n[d]) + 0.5) * self.w[d] for d in range(3)]
        X = np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, 3)
        self.V = [None] * (self.N + 1)
        self.V[self.N] = np.where(masks[self.N].ravel(), terminal_cost(X), np.inf).reshape(self.n)
        for k in range(self.N - 1, -1, -1):
            cost = self.costs(X, k)
            self.V[k] = np.where(masks[k].ravel(), cost.min(axis=1), np.inf).reshape(self.n)

    def _cells(self, P):
        q = (P - self.lo) / self.w
        i = np.floor(q).astype(np.int64)
        i = np.where((q == i) & (i > 0), i - 1, i)
        inside = np.all((P >= self.lo) & (P <= self.hi), axis=-1)
        i = np.minimum(np.maximum(i, 0), np.array(self.n) - 1)
        return i, inside

    def value(self, k, P):
        """Cost-to-go estimate at points P (..., 3); inf outside R(k)."""
        if k == self.N:
            i, inside = self._cells(P)
            ok = inside & self.masks[k][i[..., 0], i[..., 1], i[..., 2]]
            return np.where(ok, self.terminal_cost(P), np.inf)
        i, inside = self._cells(P)
        cell_ok = inside & self.masks[k][i[..., 0], i[..., 1], i[..., 2]]
        cell_v = self.V[k][i[..., 0], i[..., 1], i[..., 2]]
        # multilinear interpolation between surrounding nodes (clamped to the node range)
        q = np.clip((P - self.lo) / self.w - 0.5, 0, np.array(self.n) - 1)
        j0 = np.minimum(np.floor(q).astype(np.int64), np.maximum(np.array(self.n) - 2, 0))
        f = q - j0
        acc = np.zeros(P.shape[:-1])
        for corner in itertools.product((0, 1), repeat=3):
            idx = [np.minimum(j0[..., d] + corner[d], self.n[d] - 1) for d in range(3)]
            wgt = np.prod([f[..., d] if corner[d] else 1 - f[..., d] for d in range(3)], axis=0)
            vals = self.V[k][idx[0], idx[1], idx[2]]
            acc = acc + np.where(wgt > 0, wgt * np.where(np.isfinite(vals), vals, np.nan), 0.0)
        interp = np.where(np.isnan(acc), cell_v, acc)
        return np.where(cell_ok, interp, np.inf)

    def costs(self, X, k):
        S, ok = successors_vec(X, self.U, k, self.trace, self.params)
        fuel = self.trace.dt * np.asarray(self.params.fuel_map(self.U[:, 0]))[None, :]
        v = self.value(k + 1, S)
        return np.where(ok, fuel + v, np.inf)

    def rollout(self, x0):
        """Greedy forward pass against the tabular values; returns (states, inputs, fuel)."""
        x = np.asarray(x0, float)
        xs, us, fuel = [x], [], 0.0
        for k in range(self.N):
            c = self.costs(x[None], k)[0]
            j = int(np.argmin(c))
            if not np.isfinite(c[j]):
                raise RuntimeError(f"tabular rollout stuck at step {k}")
            S, _ = successors_vec(x[None], self.U[j:j + 1], k, self.trace, self.params)
            x = S[0, 0]
            fuel += fuel_increment(self.U[j], self.trace, self.params)
            xs.append(x)
            us.append(self.U[j])
        return np.array(xs), np.array(us), fuel
