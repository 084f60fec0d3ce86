"""Backward reachable sets on a cell grid over (dx, dv, soc).

A cell is represented by its centre.  Cell k is reachable when some grid input
takes its centre, in one Euler step, to a point whose containing cell is
reachable at k+1, without exceeding the battery power limit or leaving the box.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dynamics import DemandTrace, InputBox, StateBox, battery_power_flex, deviation_derivative
from .powertrain import ModelParams, max_battery_power

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


class InfeasibleProblem(RuntimeError):
    """A reachable set came out empty (or misses the initial state)."""

    def __init__(self, msg: str, k: int | None = None):
        super().__init__(msg)
        self.k = k


@dataclass(frozen=True)
class StateGrid:
    """Uniform cell partition of a StateBox; ``n`` cells per dimension."""

    box: StateBox = StateBox()
    n: tuple = (15, 15, 41)

    def __post_init__(self):
        n = tuple(int(x) for x in self.n)
        if len(n) != 3 or min(n) < 1:
            raise ConfigurationError(f"state grid resolution must be 3 positive ints, got {self.n}")
        object.__setattr__(self, "n", n)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.box.lo)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.box.hi)

    @property
    def width(self) -> np.ndarray:
        return (self.hi - self.lo) / np.array(self.n)

    @property
    def shape(self) -> tuple:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    def centers(self, dim: int) -> np.ndarray:
        return self.lo[dim] + (np.arange(self.n[dim]) + 0.5) * self.width[dim]

    def center_of(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return self.lo + (idx + 0.5) * self.width

    def index_1d(self, x, dim: int) -> np.ndarray:
        """Cell index along ``dim``; -1 outside the closed box. Faces go to the lower cell."""
        x = np.asarray(x, dtype=float)
        lo, hi, w = self.lo[dim], self.hi[dim], self.width[dim]
        inside = (x >= lo) & (x <= hi)  # False for NaN
        q = np.where(inside, (x - lo) / w, 0.0)
        idx = np.maximum(np.ceil(q).astype(np.int64) - 1, 0)
        idx = np.minimum(idx, self.n[dim] - 1)
        return np.where(inside, idx, -1)

    def index(self, points) -> np.ndarray:
        """(..., 3) points -> (..., 3) cell indices, rows with any -1 lie outside."""
        p = np.asarray(points, dtype=float)
        out = np.stack([self.index_1d(p[..., d], d) for d in range(3)], axis=-1)
        outside = np.any(out < 0, axis=-1, keepdims=True)
        return np.where(outside, -1, out)

    def all_centers(self) -> np.ndarray:
        """(nx, nv, ns, 3) array of cell centres."""
        g = np.meshgrid(self.centers(0), self.centers(1), self.centers(2), indexing="ij")
        return np.stack(g, axis=-1)


@dataclass(frozen=True)
class InputGrid:
    """Finite input set: the product of engine speeds and torque deviations."""

    omega_e: tuple
    dTd: tuple

    def __post_init__(self):
        w = np.asarray(self.omega_e, dtype=float)
        t = np.asarray(self.dTd, dtype=float)
        if w.ndim != 1 or t.ndim != 1 or w.size < 1 or t.size < 1:
            raise ConfigurationError("input grid needs non-empty 1-D value lists")
        if np.any(w < 0):
            raise ConfigurationError("engine speeds must be >= 0")
        object.__setattr__(self, "omega_e", tuple(float(x) for x in np.sort(w)))
        object.__setattr__(self, "dTd", tuple(float(x) for x in np.sort(t)))

    @classmethod
    def uniform(cls, box: InputBox = InputBox(), n: tuple = (31, 31)) -> "InputGrid":
        if min(n) < 2:
            raise ConfigurationError("input grid resolution must be >= 2 per dimension")
        return cls(tuple(np.linspace(*box.omega_e, n[0])), tuple(np.linspace(*box.dTd, n[1])))

    @property
    def shape(self) -> tuple:
        return (len(self.omega_e), len(self.dTd))

    def ordered(self) -> np.ndarray:
        """(n_inputs, 2) rows in tie-break order: omega_e asc, |dTd| asc, dTd asc."""
        t = np.array(self.dTd)
        t = t[np.lexsort((t, np.abs(t)))]
        w = np.array(self.omega_e)
        return np.stack(np.meshgrid(w, t, indexing="ij"), axis=-1).reshape(-1, 2)


def terminal_set(lo, hi, grid: StateGrid) -> np.ndarray:
    """Cells whose centres lie in the closed box [lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ConfigurationError(f"empty terminal box {lo} .. {hi}")
    if np.any(lo < grid.lo) or np.any(hi > grid.hi):
        raise ConfigurationError("terminal box must lie inside the state box")
    c = grid.all_centers()
    eps = 1e-12 * np.maximum(1.0, np.abs(grid.hi - grid.lo))
    return np.all((c >= lo - eps) & (c <= hi + eps), axis=-1)


def _soc_rate_all(p_batt, params: ModelParams, enforce_power: bool):
    b = params.battery
    disc = b.V_batt**2 - 4.0 * b.R_batt * p_batt
    rate = -(b.V_batt - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * b.R_batt * b.Q_batt)
    ok = p_batt <= max_battery_power(b) if enforce_power else np.ones(p_batt.shape, bool)
    return rate, ok


def successor_indices(k: int, trace: DemandTrace, grid: StateGrid, inputs: InputGrid,
                      params: ModelParams, enforce_power: bool = True):
    """Separable successor cell indices of every (cell centre, input) pair at step k.

    Returns ``(ix, iv, isoc, ok)`` with shapes (nx, nv), (nv, nb), (ns, nv, na, nb)
    and (nv, na, nb); -1 marks a successor outside the box.
    """
    dt = trace.dt
    cx, cv, cs = grid.centers(0), grid.centers(1), grid.centers(2)
    w = np.array(inputs.omega_e)
    t = np.array(inputs.dTd)
    ix = grid.index_1d(cx[:, None] + dt * cv[None, :], 0)
    _, ddv = deviation_derivative(cv[:, None], t[None, :], trace.v[k], params.vehicle)
    iv = grid.index_1d(cv[:, None] + dt * ddv, 1)
    p_batt, _, reverse = battery_power_flex(cv[:, None, None], w[None, :, None], t[None, None, :], k, trace, params)
    rate, ok = _soc_rate_all(p_batt, params, enforce_power)
    ok = ok & ~reverse
    isoc = grid.index_1d(cs[:, None, None, None] + dt * rate[None], 2)
    return ix, iv, isoc, ok


def backward_step(mask_next: np.ndarray, k: int, trace: DemandTrace, grid: StateGrid,
                  inputs: InputGrid, params: ModelParams, enforce_power: bool = True) -> np.ndarray:
    """Reachable mask at step k from the mask at k+1."""
    nx, nv, ns = grid.n
    if mask_next.shape != grid.n:
        raise ValueError(f"mask shape {mask_next.shape} does not match grid {grid.n}")
    ix, iv, isoc, ok = successor_indices(k, trace, grid, inputs, params, enforce_power)
    # pad with an all-False slab so that index -1 lands on "unreachable"
    padded = np.zeros((nx + 1, nv + 1, ns + 1), dtype=bool)
    padded[:nx, :nv, :ns] = mask_next
    out = np.zeros(grid.n, dtype=bool)
    for j in range(nv):
        if not ok[j].any():
            continue
        sub = padded[ix[:, j]][:, iv[j]]  # (nx, nb, ns+1)
        b = np.broadcast_to(np.arange(len(inputs.dTd))[None, None, :], isoc[:, j].shape)
        hit = sub[:, b, isoc[:, j]]  # (nx, ns, na, nb)
        hit &= ok[j][None, None]
        out[:, j, :] = hit.any(axis=(2, 3))
    return out


@dataclass
class ReachableSet:
    """Per-step masks, index 0..N, plus the geometry needed to query them."""

    masks: np.ndarray  # (N+1, nx, nv, ns) bool
    grid: StateGrid
    terminal_lo: tuple
    terminal_hi: tuple

    @property
    def n_steps(self) -> int:
        return self.masks.shape[0] - 1

    def contains(self, k: int, state) -> np.ndarray | bool:
        """Membership of one or many states at step k.

        For k < N the answer is the mask of the containing cell.  At k = N it is the
        exact closed terminal box, which the terminal mask renders on the grid.
        """
        s = np.asarray(state, dtype=float)
        if k == self.n_steps:
            out = np.all((s >= np.array(self.terminal_lo)) & (s <= np.array(self.terminal_hi)), axis=-1)
        else:
            idx = self.grid.index(s)
            inside = np.all(idx >= 0, axis=-1)
            safe = np.where(idx < 0, 0, idx)
            out = inside & self.masks[k][safe[..., 0], safe[..., 1], safe[..., 2]]
        return bool(out) if np.ndim(out) == 0 else out

    def cell_contains(self, k: int, state) -> np.ndarray | bool:
        """Pure cell-mask membership, including at k = N."""
        s = np.asarray(state, dtype=float)
        idx = self.grid.index(s)
        inside = np.all(idx >= 0, axis=-1)
        safe = np.where(idx < 0, 0, idx)
        out = inside & self.masks[k][safe[..., 0], safe[..., 1], safe[..., 2]]
        return bool(out) if np.ndim(out) == 0 else out

    def sample(self, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
        """n states: a uniformly chosen true cell, then a uniform point inside it."""
        cells = np.argwhere(self.masks[k])
        if len(cells) == 0:
            raise InfeasibleProblem(f"reachable set at step {k} is empty", k)
        pick = cells[rng.integers(0, len(cells), size=n)]
        u = rng.random((n, 3))
        return self.grid.lo + (pick + u) * self.grid.width

    def to_csv(self, path) -> None:
        """Dump as ``k,i,j,l,reachable`` rows."""
        N1, nx, nv, ns = self.masks.shape
        k, i, j, l = np.meshgrid(np.arange(N1), np.arange(nx), np.arange(nv), np.arange(ns), indexing="ij")
        rows = np.stack([k.ravel(), i.ravel(), j.ravel(), l.ravel(), self.masks.ravel().astype(int)], axis=1)
        np.savetxt(path, rows, fmt="%d", delimiter=",", header="k,i,j,l,reachable", comments="")

    @classmethod
    def from_csv(cls, path, grid: StateGrid, terminal_lo, terminal_hi) -> "ReachableSet":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        N1 = int(rows[:, 0].max()) + 1
        masks = np.zeros((N1, *grid.n), dtype=bool)
        masks[rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3]] = rows[:, 4].astype(bool)
        return cls(masks, grid, tuple(terminal_lo), tuple(terminal_hi))

    def save(self, path) -> None:
        _atomic_savez(path, masks=np.packbits(self.masks.ravel()), shape=np.array(self.masks.shape),
                      box_lo=self.grid.lo, box_hi=self.grid.hi, n=np.array(self.grid.n),
                      terminal_lo=np.array(self.terminal_lo), terminal_hi=np.array(self.terminal_hi))

    @classmethod
    def load(cls, path) -> "ReachableSet":
        with np.load(path) as z:
            shape = tuple(int(x) for x in z["shape"])
            masks = np.unpackbits(z["masks"])[: int(np.prod(shape))].astype(bool).reshape(shape)
            grid = StateGrid(StateBox(tuple(z["box_lo"]), tuple(z["box_hi"])), tuple(int(x) for x in z["n"]))
            return cls(masks, grid, tuple(z["terminal_lo"]), tuple(z["terminal_hi"]))


def _atomic_savez(path, **arrays) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp.npz")
    os.close(fd)
    try:
        np.savez_compressed(tmp, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def compute_reachable_set(trace: DemandTrace, grid: StateGrid, inputs: InputGrid, params: ModelParams,
                          terminal_lo, terminal_hi, enforce_power: bool = True) -> ReachableSet:
    """Sweep backward from the terminal box to step 0."""
    N = trace.n_steps
    masks = np.zeros((N + 1, *grid.n), dtype=bool)
    masks[N] = terminal_set(terminal_lo, terminal_hi, grid)
    for k in range(N - 1, -1, -1):
        masks[k] = backward_step(masks[k + 1], k, trace, grid, inputs, params, enforce_power)
        if not masks[k].any():
            log.warning("reachable set empty at step %d", k)
    return ReachableSet(masks, grid, tuple(float(x) for x in terminal_lo), tuple(float(x) for x in terminal_hi))


def digest(trace: DemandTrace, grid: StateGrid, inputs: InputGrid, params: ModelParams,
           terminal_lo, terminal_hi, enforce_power: bool = True) -> str:
    """Cache key over everything the masks depend on."""
    h = hashlib.sha256()
    for arr in (trace.v, trace.Td, params.fuel_map.omega, params.fuel_map.rate):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    meta = {
        "dt": trace.dt,
        "vehicle": asdict(params.vehicle),
        "powertrain": asdict(params.powertrain),
        "battery": asdict(params.battery),
        "omega_max": params.omega_max,
        "box": [grid.box.lo, grid.box.hi],
        "n": grid.n,
        "omega_e": inputs.omega_e,
        "dTd": inputs.dTd,
        "terminal": [list(map(float, terminal_lo)), list(map(float, terminal_hi))],
        "enforce_power": enforce_power,
    }
    h.update(json.dumps(meta, sort_keys=True).encode())
    return h.hexdigest()[:32]


def cached_reachable_set(cache_dir, trace, grid, inputs, params, terminal_lo, terminal_hi) -> ReachableSet:
    """compute_reachable_set with an on-disk cache keyed by ``digest``."""
    if cache_dir is None:
        return compute_reachable_set(trace, grid, inputs, params, terminal_lo, terminal_hi)
    path = Path(cache_dir) / f"reach_{digest(trace, grid, inputs, params, terminal_lo, terminal_hi)}.npz"
    if path.exists():
        log.info("reachable set cache hit: %s", path)
        return ReachableSet.load(path)
    reach = compute_reachable_set(trace, grid, inputs, params, terminal_lo, terminal_hi)
    reach.save(path)
    return reach
