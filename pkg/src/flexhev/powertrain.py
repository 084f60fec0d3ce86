"""Power-split (THS) powertrain physics.

Sign conventions
----------------
P_batt > 0 : battery discharging (SoC falls)
P_batt < 0 : battery charging (SoC rises)
T * omega > 0 on an electric machine : machine is motoring (consumes electricity)

Every function here is pure and accepts scalars or numpy arrays.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

OMEGA_E_MAX = 450.0  # rad/s


class DomainError(ValueError):
    """Argument outside the physical domain of a map or curve."""


class InfeasiblePowerError(ValueError):
    """Battery power exceeds V^2/(4R); the equivalent circuit has no real solution."""


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1350.0  # kg
    r: float = 0.28  # m, wheel radius
    A_f: float = 2.2  # m^2
    rho: float = 1.225  # kg/m^3
    C_drag: float = 0.3
    mu_R: float = 0.007
    g: float = 9.81  # m/s^2

    def __post_init__(self):
        for name in ("m", "r", "A_f", "rho", "C_drag", "mu_R", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.mu_R >= 1:
            raise ValueError(f"mu_R must be < 1, got {self.mu_R}")
        if self.C_drag >= 2:
            raise ValueError(f"C_drag must be < 2, got {self.C_drag}")

    @property
    def drag_factor(self) -> float:
        """0.5 * rho * C_drag * A_f, in N/(m/s)^2."""
        return 0.5 * self.rho * self.C_drag * self.A_f


@dataclass(frozen=True)
class PowertrainParams:
    r_r: float = 0.078  # m, ring radius
    r_s: float = 0.030  # m, sun radius
    k_C: float = 3.9  # coupler ratio
    mu_m: float = 0.9
    mu_g: float = 0.9

    def __post_init__(self):
        if not (0 < self.mu_m <= 1 and 0 < self.mu_g <= 1):
            raise ValueError("machine efficiencies must lie in (0, 1]")
        if not (self.r_r > self.r_s > 0):
            raise ValueError("need r_r > r_s > 0")
        if not self.k_C > 0:
            raise ValueError("k_C must be > 0")


@dataclass(frozen=True)
class BatteryParams:
    V_batt: float = 202.0  # V
    R_batt: float = 0.45  # ohm
    Q_batt: float = 23400.0  # A*s

    def __post_init__(self):
        for name in ("V_batt", "R_batt", "Q_batt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not np.isfinite(max_battery_power(self)):
            raise ValueError("maximum battery power is not finite")


def optimal_engine_torque(omega_e, omega_max: float = OMEGA_E_MAX):
    """Engine torque on the best-efficiency line [N*m] for engine speed [rad/s]."""
    w = np.asarray(omega_e, dtype=float)
    if np.any(w < 0) or np.any(w > omega_max) or np.any(~np.isfinite(w)):
        raise DomainError(f"engine speed outside [0, {omega_max}] rad/s")
    t = 60.0 * np.arctan(w / 70.0) - 0.00018 * w**2 + 0.14 * w
    return t if t.ndim else float(t)


def max_battery_power(batt: BatteryParams) -> float:
    return batt.V_batt**2 / (4.0 * batt.R_batt)


def soc_rate(p_batt, batt: BatteryParams):
    """SoC derivative [1/s]; NaN where the power is infeasible. Vectorised, never raises."""
    p = np.asarray(p_batt, dtype=float)
    disc = batt.V_batt**2 - 4.0 * batt.R_batt * p
    with np.errstate(invalid="ignore"):
        root = np.sqrt(disc)
    return -(batt.V_batt - root) / (2.0 * batt.R_batt * batt.Q_batt)


def soc_derivative(p_batt, batt: BatteryParams):
    """Equivalent-circuit SoC derivative [1/s] for battery power [W].

    Raises InfeasiblePowerError when ``p_batt > V^2/(4R)``.
    """
    p = np.asarray(p_batt, dtype=float)
    if np.any(p > max_battery_power(batt)):
        raise InfeasiblePowerError(
            f"battery power {np.max(p):.1f} W exceeds {max_battery_power(batt):.1f} W"
        )
    out = soc_rate(p, batt)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class OperatingPoint:
    """Speeds [rad/s], torques [N*m] and powers [W] of every powertrain node."""

    omega_e: np.ndarray
    omega_r: np.ndarray
    omega_g: np.ndarray
    omega_m: np.ndarray
    omega_d: np.ndarray
    T_e: np.ndarray
    T_r: np.ndarray
    T_g: np.ndarray
    T_m: np.ndarray
    P_m: np.ndarray
    P_g: np.ndarray
    P_batt: np.ndarray
    P_e: np.ndarray
    k_m: np.ndarray
    k_g: np.ndarray


def ring_speed_from(omega_e, omega_g, pt: PowertrainParams):
    """Invert the planetary speed relation for the ring speed."""
    s = pt.r_s + pt.r_r
    return (s * np.asarray(omega_e) - pt.r_s * np.asarray(omega_g)) / pt.r_r


def engine_speed_from(omega_r, omega_g, pt: PowertrainParams):
    """Planetary speed relation: carrier (engine) speed from ring and sun speeds."""
    s = pt.r_s + pt.r_r
    return (pt.r_r / s) * np.asarray(omega_r) + (pt.r_s / s) * np.asarray(omega_g)


def split_engine_torque(T_e, pt: PowertrainParams):
    """(T_g, T_r) reaction torques at the sun and ring for engine torque T_e."""
    s = pt.r_s + pt.r_r
    T_e = np.asarray(T_e, dtype=float)
    return -(pt.r_s / s) * T_e, (pt.r_r / s) * T_e


def _sign_exponent(mech_power):
    # -1 while motoring; the zero-power boundary is +1
    return np.where(mech_power > 0, -1, 1)


def operating_point(
    v,
    omega_e,
    torque_demand,
    vehicle: VehicleParams,
    pt: PowertrainParams,
    omega_max: float = OMEGA_E_MAX,
) -> OperatingPoint:
    """Solve the lossless gear algebra for vehicle speed, engine speed and driveline torque.

    The engine is assumed to sit on its optimal line, so ``T_e`` follows from ``omega_e``.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise DomainError("vehicle speed must be >= 0")
    omega_e = np.asarray(omega_e, dtype=float)
    T_e = np.asarray(optimal_engine_torque(omega_e, omega_max), dtype=float)
    omega_d = v / vehicle.r
    omega_m = pt.k_C * omega_d
    omega_r = omega_m
    s = pt.r_s + pt.r_r
    omega_g = (s * omega_e - pt.r_r * omega_r) / pt.r_s
    T_g, T_r = split_engine_torque(T_e, pt)
    T_m = np.asarray(torque_demand, dtype=float) / pt.k_C - T_r
    P_m = T_m * omega_m
    P_g = T_g * omega_g
    k_m = _sign_exponent(P_m)
    k_g = _sign_exponent(P_g)
    P_batt = pt.mu_m ** k_m * P_m + pt.mu_g ** k_g * P_g
    return OperatingPoint(
        omega_e=omega_e, omega_r=omega_r, omega_g=omega_g, omega_m=omega_m,
        omega_d=omega_d, T_e=T_e, T_r=T_r, T_g=T_g, T_m=T_m, P_m=P_m, P_g=P_g,
        P_batt=P_batt, P_e=T_e * omega_e, k_m=k_m, k_g=k_g,
    )


def battery_power(op: OperatingPoint, pt: PowertrainParams):
    """Inverter power balance, one efficiency exponent per machine. Positive = discharge."""
    k_m = _sign_exponent(op.T_m * op.omega_m)
    k_g = _sign_exponent(op.T_g * op.omega_g)
    p = pt.mu_m ** k_m * op.T_m * op.omega_m + pt.mu_g ** k_g * op.T_g * op.omega_g
    return p if np.ndim(p) else float(p)


def battery_power_aggregate(T_d, omega_d, T_e, omega_e, v, k_m, k_g, vehicle, pt):
    """Closed-form battery power valid while both sign exponents are fixed."""
    em = pt.mu_m ** np.asarray(k_m)
    eg = pt.mu_g ** np.asarray(k_g)
    return (
        em * T_d * omega_d
        - eg * T_e * omega_e
        - pt.k_C * pt.r_r * (em - eg) / (vehicle.r * (pt.r_s + pt.r_r)) * T_e * v
    )


@dataclass(frozen=True)
class FuelMap:
    """Fuel rate [g/s] along the optimal engine line, tabulated against engine speed.

    Piecewise-linear between rows; speeds beyond the last row are a DomainError.
    ``max_torque`` optionally tabulates the full-load torque envelope on the same speeds.
    """

    omega: np.ndarray
    rate: np.ndarray
    omega_max: float = OMEGA_E_MAX
    max_torque: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        q = np.asarray(self.rate, dtype=float)
        if w.ndim != 1 or w.shape != q.shape or w.size < 2:
            raise ValueError("fuel map needs matching 1-D omega/rate columns with >= 2 rows")
        if np.any(np.diff(w) <= 0):
            raise ValueError("fuel map engine speeds must be strictly increasing")
        if w[0] > 0:
            raise ValueError("fuel map must start at omega_e = 0")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ValueError("fuel rates must be finite and >= 0")
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "rate", q)
        object.__setattr__(self, "omega_max", float(min(self.omega_max, w[-1])))
        if self.max_torque is not None:
            env = np.asarray(self.max_torque, dtype=float)
            if env.shape != w.shape:
                raise ValueError("max_torque must have one entry per omega row")
            inside = w <= self.omega_max
            if np.any(optimal_engine_torque(w[inside], self.omega_max) > env[inside]):
                raise ValueError("optimal engine line exceeds the maximum-torque envelope")
            object.__setattr__(self, "max_torque", env)

    @classmethod
    def surrogate(
        cls,
        eta: float = 0.34,
        q_lhv: float = 43_000.0,
        idle: float = 0.0,
        omega_max: float = OMEGA_E_MAX,
        step: float = 1.0,
    ) -> "FuelMap":
        """Constant-efficiency map: fuel = omega*T_opt(omega)/(eta*Q_lhv) + idle.

        q_lhv in J/g. Tabulated every ``step`` rad/s, so integer speeds evaluate exactly.
        """
        if not (0 < eta <= 1 and q_lhv > 0 and idle >= 0):
            raise ValueError("surrogate needs 0 < eta <= 1, q_lhv > 0, idle >= 0")
        n = int(round(omega_max / step))
        w = np.linspace(0.0, n * step, n + 1)
        p_e = w * optimal_engine_torque(w, n * step)
        rate = p_e / (eta * q_lhv) + idle
        return cls(w, rate, omega_max=omega_max)

    @classmethod
    def from_csv(cls, path, omega_max: float = OMEGA_E_MAX) -> "FuelMap":
        """Read a ``omega_e,fuel_rate`` table (rad/s, g/s)."""
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [c.strip() for c in rows[0]] != ["omega_e", "fuel_rate"]:
            raise ValueError(f"{path}: header must be 'omega_e,fuel_rate'")
        data = np.array([[float(c) for c in row] for row in rows[1:] if row], dtype=float)
        if data.ndim != 2 or data.shape[1] != 2:
            raise ValueError(f"{path}: expected two numeric columns")
        return cls(data[:, 0], data[:, 1], omega_max=omega_max)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["omega_e", "fuel_rate"])
            for a, b in zip(self.omega, self.rate):
                w.writerow([repr(float(a)), repr(float(b))])

    def __call__(self, omega_e):
        return fuel_rate(omega_e, self)


def fuel_rate(omega_e, fuel_map: FuelMap):
    """Fuel mass rate [g/s] at engine speed omega_e on the optimal line."""
    w = np.asarray(omega_e, dtype=float)
    if np.any(w < 0) or np.any(w > fuel_map.omega_max) or np.any(~np.isfinite(w)):
        raise DomainError(f"engine speed outside [0, {fuel_map.omega_max}] rad/s")
    out = np.interp(w, fuel_map.omega, fuel_map.rate)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ModelParams:
    """Everything the vehicle/powertrain model needs, bundled."""

    vehicle: VehicleParams = VehicleParams()
    powertrain: PowertrainParams = PowertrainParams()
    battery: BatteryParams = BatteryParams()
    fuel_map: FuelMap = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.fuel_map is None:
            object.__setattr__(self, "fuel_map", FuelMap.surrogate())

    @property
    def omega_max(self) -> float:
        return self.fuel_map.omega_max
