"""Synthetic drive cycles: steady cruise, sawtooth stop-and-go, urban random walk."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DemandTrace
from .powertrain import VehicleParams

KINDS = ("cruise", "sawtooth", "urban")
A_LIMIT = 3.0  # m/s^2


@dataclass(frozen=True)
class SyntheticCycleSpec:
    kind: str = "urban"
    duration: float = 90.0  # s
    v_max: float = 15.0  # m/s
    v_min: float = 0.0  # m/s
    dt: float = 1.0  # s
    accel: float = 1.0  # m/s^2, ramp rate for sawtooth, step scale for urban
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cycle kind {self.kind!r}; choose from {KINDS}")
        if not (self.duration > 0 and self.dt > 0):
            raise ValueError("duration and dt must be > 0")
        if not 0 <= self.v_min <= self.v_max:
            raise ValueError("need 0 <= v_min <= v_max")
        if not 0 < self.accel <= A_LIMIT:
            raise ValueError(f"accel must be in (0, {A_LIMIT}]")


def _sawtooth(n: int, spec: SyntheticCycleSpec) -> np.ndarray:
    """Ramp 0 -> v_max -> 0 at +/- accel, then dwell a quarter of the ramp time."""
    ramp = max(int(np.ceil(spec.v_max / (spec.accel * spec.dt))), 1)
    up = np.minimum(np.arange(ramp + 1) * spec.accel * spec.dt, spec.v_max)
    period = np.concatenate([up, up[-2::-1], np.zeros(max(ramp // 4, 1))])
    reps = int(np.ceil(n / period.size)) + 1
    return np.maximum(np.tile(period, reps)[:n], spec.v_min)


def _urban(n: int, spec: SyntheticCycleSpec, rng: np.random.Generator) -> np.ndarray:
    """Mean-reverting random walk on acceleration with occasional stops."""
    v = np.empty(n)
    v[0] = 0.5 * (spec.v_min + spec.v_max)
    a = 0.0
    stop_left = 0
    for k in range(1, n):
        if stop_left > 0:
            target = spec.v_min
            stop_left -= 1
        else:
            target = 0.6 * spec.v_max
            if rng.random() < 0.04:
                stop_left = int(rng.integers(8, 16))
        a = 0.6 * a + 0.15 * (target - v[k - 1]) + spec.accel * rng.normal(0.0, 0.6)
        a = np.clip(a, -spec.accel, spec.accel)
        v[k] = np.clip(v[k - 1] + a * spec.dt, spec.v_min, spec.v_max)
    return v


def cycle_speeds(spec: SyntheticCycleSpec) -> np.ndarray:
    n = int(round(spec.duration / spec.dt)) + 1
    if spec.kind == "cruise":
        return np.full(n, spec.v_max)
    if spec.kind == "sawtooth":
        return _sawtooth(n, spec)
    return _urban(n, spec, np.random.default_rng(spec.seed))


def generate_cycle(spec: SyntheticCycleSpec, vehicle: VehicleParams = VehicleParams()) -> DemandTrace:
    v = cycle_speeds(spec)
    trace = DemandTrace.from_speed(v, spec.dt, vehicle)
    assert np.all(np.abs(trace.a) <= A_LIMIT + 1e-12)
    return trace
