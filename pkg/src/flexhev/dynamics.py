"""Upper-level inverse dynamics and the flexible-demand deviation model.

State  X = (dx, dv, soc): displacement/velocity deviation from the upper-level
plan and battery state of charge.  Input U = (omega_e, dTd): engine speed on the
optimal line and the torque deviation from the requested driveline torque.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .powertrain import (
    DomainError,
    ModelParams,
    VehicleParams,
    fuel_rate,
    max_battery_power,
    optimal_engine_torque,
    soc_rate,
)


class InfeasibleTransition(ValueError):
    """The requested input cannot be delivered (battery power or reverse driving)."""


class OutOfBox(ValueError):
    """The successor state leaves the admissible state box."""


class DeviationState(NamedTuple):
    dx: float  # m
    dv: float  # m/s
    soc: float  # fraction


class ControlInput(NamedTuple):
    omega_e: float  # rad/s
    dTd: float  # N*m


@dataclass(frozen=True)
class StateBox:
    """Closed box on (dx, dv, soc)."""

    lo: tuple = (-3.5, -2.5, 0.50)
    hi: tuple = (3.5, 2.5, 0.70)

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(lo >= hi):
            raise ValueError(f"bad state box {self.lo} .. {self.hi}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("state box must be finite")
        object.__setattr__(self, "lo", tuple(float(x) for x in lo))
        object.__setattr__(self, "hi", tuple(float(x) for x in hi))

    def contains(self, dx, dv, soc):
        lo, hi = self.lo, self.hi
        return (
            (dx >= lo[0]) & (dx <= hi[0])
            & (dv >= lo[1]) & (dv <= hi[1])
            & (soc >= lo[2]) & (soc <= hi[2])
        )


@dataclass(frozen=True)
class InputBox:
    omega_e: tuple = (0.0, 450.0)
    dTd: tuple = (-150.0, 150.0)

    def __post_init__(self):
        if not (0 <= self.omega_e[0] < self.omega_e[1]):
            raise ValueError("engine speed bounds must satisfy 0 <= lo < hi")
        if not self.dTd[0] <= self.dTd[1]:
            raise ValueError("torque deviation bounds reversed")


def demanded_torque(v, a, vehicle: VehicleParams):
    """Driveline torque [N*m] that realises acceleration ``a`` at speed ``v``."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise DomainError("speed must be >= 0")
    f = (
        vehicle.m * np.asarray(a, dtype=float)
        + vehicle.drag_factor * v**2
        + vehicle.mu_R * vehicle.m * vehicle.g
    )
    out = vehicle.r * f
    return out if np.ndim(out) else float(out)


def deviation_derivative(dv, dTd, v, vehicle: VehicleParams):
    """(d(dx)/dt, d(dv)/dt) of the deviation channels."""
    dv = np.asarray(dv, dtype=float)
    ddv = (-vehicle.drag_factor * dv * (2.0 * np.asarray(v) + dv) + np.asarray(dTd) / vehicle.r) / vehicle.m
    return dv, ddv


@dataclass(frozen=True)
class DemandTrace:
    """Upper-level plan sampled every ``dt`` seconds: speed, acceleration, torque demand.

    Index k runs 0..n_steps; step k maps sample k to k+1.
    """

    dt: float
    v: np.ndarray
    a: np.ndarray
    Td: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        v, a, Td = (np.asarray(x, dtype=float) for x in (self.v, self.a, self.Td))
        if not (v.ndim == 1 and v.shape == a.shape == Td.shape and v.size >= 1):
            raise ValueError("v, a, Td must be equal-length 1-D sequences")
        if np.any(v < 0):
            raise ValueError("upper-level speed must be >= 0")
        for x in (v, a, Td):
            x.setflags(write=False)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "Td", Td)

    @classmethod
    def from_speed(cls, v, dt: float, vehicle: VehicleParams, t0: float = 0.0) -> "DemandTrace":
        """Build the trace from sampled speed; acceleration by central differences."""
        v = np.asarray(v, dtype=float)
        a = np.gradient(v, dt) if v.size > 1 else np.zeros_like(v)
        return cls(dt, v, a, demanded_torque(v, a, vehicle), t0)

    @property
    def n_steps(self) -> int:
        return self.v.size - 1

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.v.size)

    def truncated(self, n_steps: int) -> "DemandTrace":
        return DemandTrace(self.dt, self.v[: n_steps + 1], self.a[: n_steps + 1], self.Td[: n_steps + 1], self.t0)


def load_cycle_csv(path, vehicle: VehicleParams, tol: float = 1e-6) -> DemandTrace:
    """Read a ``t,v`` drive cycle (s, m/s) with strictly uniform spacing."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["t", "v"]:
        raise ValueError(f"{path}: header must be 't,v'")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] != 2:
        raise ValueError(f"{path}: need at least two 't,v' rows")
    t, v = data[:, 0], data[:, 1]
    steps = np.diff(t)
    dt = float(steps[0])
    if dt <= 0 or np.max(np.abs(steps - dt)) > tol:
        raise ValueError(f"{path}: time stamps must be strictly uniform (tolerance {tol} s)")
    if np.any(v < 0):
        raise ValueError(f"{path}: negative speed")
    return DemandTrace.from_speed(v, dt, vehicle, t0=float(t[0]))


def write_cycle_csv(trace: DemandTrace, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "v"])
        for t, v in zip(trace.t, trace.v):
            w.writerow([f"{t:.6f}", repr(float(v))])


class Transition(NamedTuple):
    """Vectorised one-step result. ``ok`` is False where the input cannot be delivered."""

    dx: np.ndarray
    dv: np.ndarray
    soc: np.ndarray
    p_batt: np.ndarray
    p_e: np.ndarray
    fuel: np.ndarray
    ok: np.ndarray


def battery_power_flex(dv, omega_e, dTd, k: int, trace: DemandTrace, params: ModelParams):
    """Battery power [W] for deviation speed dv and input (omega_e, dTd) at step k.

    Returns (p_batt, p_e, reverse) where ``reverse`` flags v(k)+dv < 0 (driveline clamped to 0).
    """
    veh, pt = params.vehicle, params.powertrain
    v_flex = trace.v[k] + np.asarray(dv, dtype=float)
    reverse = v_flex < 0
    v_flex = np.maximum(v_flex, 0.0)
    omega_e = np.asarray(omega_e, dtype=float)
    T_e = optimal_engine_torque(omega_e, params.omega_max)
    T_demand = trace.Td[k] + np.asarray(dTd, dtype=float)
    # same algebra as powertrain.operating_point, inlined for broadcasting speed
    omega_m = pt.k_C * v_flex / veh.r
    s = pt.r_s + pt.r_r
    omega_g = (s * omega_e - pt.r_r * omega_m) / pt.r_s
    T_g = -(pt.r_s / s) * T_e
    T_m = T_demand / pt.k_C - (pt.r_r / s) * T_e
    P_m = T_m * omega_m
    P_g = T_g * omega_g
    p_batt = np.where(P_m > 0, P_m / pt.mu_m, P_m * pt.mu_m) + np.where(P_g > 0, P_g / pt.mu_g, P_g * pt.mu_g)
    return p_batt, T_e * omega_e, reverse


def transition(dx, dv, soc, omega_e, dTd, k: int, trace: DemandTrace, params: ModelParams) -> Transition:
    """Euler step of the full state over ``trace.dt``; all arguments broadcast."""
    veh, dt = params.vehicle, trace.dt
    dx = np.asarray(dx, dtype=float)
    dv = np.asarray(dv, dtype=float)
    soc = np.asarray(soc, dtype=float)
    p_batt, p_e, reverse = battery_power_flex(dv, omega_e, dTd, k, trace, params)
    rate = soc_rate(p_batt, params.battery)
    ok = (p_batt <= max_battery_power(params.battery)) & ~reverse
    ddx, ddv = deviation_derivative(dv, dTd, trace.v[k], veh)
    shape = np.broadcast_shapes(dx.shape, dv.shape, soc.shape, np.shape(omega_e), np.shape(dTd))
    return Transition(
        dx=np.broadcast_to(dx + dt * ddx, shape),
        dv=np.broadcast_to(dv + dt * ddv, shape),
        soc=np.broadcast_to(soc + dt * rate, shape),
        p_batt=np.broadcast_to(p_batt, shape),
        p_e=np.broadcast_to(p_e, shape),
        fuel=np.broadcast_to(fuel_rate(omega_e, params.fuel_map), shape),
        ok=np.broadcast_to(ok, shape),
    )


def step(
    state: DeviationState,
    u: ControlInput,
    k: int,
    trace: DemandTrace,
    params: ModelParams,
    box: StateBox | None = None,
) -> DeviationState:
    """One Euler step X(k+1) = X(k) + dt*F(X(k), U(k)).

    Raises InfeasibleTransition (battery power above V^2/4R or reverse driving)
    and OutOfBox when the successor leaves ``box``.
    """
    if not 0 <= k < trace.n_steps:
        raise IndexError(f"step index {k} outside 0..{trace.n_steps - 1}")
    tr = transition(state[0], state[1], state[2], u[0], u[1], k, trace, params)
    if not bool(tr.ok):
        raise InfeasibleTransition(
            f"step {k}: input {tuple(u)} infeasible from {tuple(state)} (P_batt={float(tr.p_batt):.1f} W)"
        )
    nxt = DeviationState(float(tr.dx), float(tr.dv), float(tr.soc))
    if box is not None and not bool(box.contains(*nxt)):
        raise OutOfBox(f"step {k}: successor {tuple(nxt)} leaves the state box")
    return nxt


def simulate(x0, inputs, trace: DemandTrace, params: ModelParams, box: StateBox | None = None):
    """Roll a fixed input sequence forward; returns an (n+1, 3) state array."""
    xs = [DeviationState(*x0)]
    for k, u in enumerate(inputs):
        xs.append(step(xs[-1], ControlInput(*u), k, trace, params, box))
    return np.array(xs, dtype=float)
