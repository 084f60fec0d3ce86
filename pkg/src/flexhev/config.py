"""Flat ``key = value`` experiment configuration with units and range checks.

Every key has a default, a unit (written as a trailing comment by ``dump_config``)
and an admissible range.  Unknown keys, duplicates, malformed lines and
out-of-range values raise ConfigError carrying the offending line number.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adp import TerminalPenalty
from .baseline import SocGrid
from .dynamics import InputBox, StateBox
from .powertrain import BatteryParams, FuelMap, ModelParams, PowertrainParams, VehicleParams
from .reachable import InputGrid, StateGrid
from .valuenet import TrainingConfig


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, path=None):
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + msg)
        self.line = line


@dataclass(frozen=True)
class Key:
    default: object
    unit: str
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False  # exclusive lower bound
    kind: type = float


_INF = float("inf")

# key -> spec; order here is the order written by dump_config
KEYS: dict[str, Key] = {
    # vehicle
    "m": Key(1350.0, "kg", 100.0, 1e5),
    "r": Key(0.28, "m", 0.05, 2.0),
    "A_f": Key(2.2, "m^2", 0.1, 20.0),
    "rho": Key(1.225, "kg/m^3", 0.1, 5.0),
    "C_d": Key(0.3, "-", 0.0, 2.0, lo_open=True),
    "mu_R": Key(0.007, "-", 0.0, 0.1, lo_open=True),
    "g": Key(9.81, "m/s^2", 9.0, 10.5),
    # powertrain
    "r_r": Key(0.078, "m", 0.0, 1.0, lo_open=True),
    "r_s": Key(0.030, "m", 0.0, 1.0, lo_open=True),
    "k_C": Key(3.9, "-", 0.0, 50.0, lo_open=True),
    "mu_g": Key(0.9, "-", 0.0, 1.0, lo_open=True),
    "mu_m": Key(0.9, "-", 0.0, 1.0, lo_open=True),
    # battery
    "V_batt": Key(202.0, "V", 0.0, 2000.0, lo_open=True),
    "R_batt": Key(0.45, "ohm", 0.0, 100.0, lo_open=True),
    "Q_batt": Key(23400.0, "A*s", 0.0, 1e8, lo_open=True),
    # engine and fuel
    "omega_e_max": Key(450.0, "rad/s", 0.0, 2000.0, lo_open=True),
    "fuel_map": Key("", "path, empty = efficiency surrogate", kind=str),
    "fuel_eta": Key(0.34, "-", 0.0, 1.0, lo_open=True),
    "fuel_lhv": Key(43000.0, "J/g", 0.0, 1e6, lo_open=True),
    "fuel_idle": Key(0.0, "g/s", 0.0, 10.0),
    # state box
    "dx_min": Key(-3.5, "m", -100.0, 0.0),
    "dx_max": Key(3.5, "m", 0.0, 100.0),
    "dv_min": Key(-2.5, "m/s", -50.0, 0.0),
    "dv_max": Key(2.5, "m/s", 0.0, 50.0),
    "soc_min": Key(0.5, "fraction", 0.0, 1.0),
    "soc_max": Key(0.7, "fraction", 0.0, 1.0),
    # input box
    "dTd_min": Key(-150.0, "N*m", -1e4, 0.0),
    "dTd_max": Key(150.0, "N*m", 0.0, 1e4),
    # resolutions
    "n_dx": Key(15, "cells", 1, 1001, kind=int),
    "n_dv": Key(15, "cells", 1, 1001, kind=int),
    "n_soc": Key(41, "cells", 1, 1001, kind=int),
    "n_omega": Key(31, "nodes", 2, 2001, kind=int),
    "n_dTd": Key(31, "nodes", 2, 2001, kind=int),
    # terminal box
    "dx_N_min": Key(-2.0, "m", -100.0, 0.0),
    "dx_N_max": Key(2.0, "m", 0.0, 100.0),
    "dv_N_min": Key(-1.5, "m/s", -50.0, 0.0),
    "dv_N_max": Key(1.5, "m/s", 0.0, 50.0),
    "soc_N_min": Key(0.53, "fraction", 0.0, 1.0),
    "soc_N_max": Key(0.67, "fraction", 0.0, 1.0),
    # zero-penalty band
    "dx_low": Key(-0.5, "m", -100.0, 0.0),
    "dx_high": Key(0.5, "m", 0.0, 100.0),
    "dv_low": Key(-0.5, "m/s", -50.0, 0.0),
    "dv_high": Key(0.5, "m/s", 0.0, 50.0),
    "soc_low": Key(0.59, "fraction", 0.0, 1.0),
    "soc_high": Key(0.63, "fraction", 0.0, 1.0),
    "gamma_pen": Key(100.0, "g", 0.0, 1e6, lo_open=True),
    # initial state
    "dx0": Key(0.0, "m", -100.0, 100.0),
    "dv0": Key(0.0, "m/s", -50.0, 50.0),
    "soc0": Key(0.6, "fraction", 0.0, 1.0),
    # value-net training
    "samples": Key(1024, "states per step", 1, 10**6, kind=int),
    "alpha": Key(1e-4, "g, probe RMS change", 0.0, _INF, lo_open=True),
    "iter_max": Key(1000, "iterations", 1, 10**7, kind=int),
    "lr": Key(0.01, "-", 0.0, 10.0, lo_open=True),
    "lr_decay": Key(0.999, "per iteration", 0.0, 1.0, lo_open=True),
    "optimizer": Key("lbfgs", "lbfgs | adam | gd", kind=str),
    "batch_size": Key(0, "samples, 0 = full batch", 0, 10**6, kind=int),
    "hidden": Key("32,32", "units per hidden layer", kind=str),
    "probe_size": Key(512, "states", 1, 10**6, kind=int),
    "exact_terminal": Key(True, "use the terminal cost itself at step N", kind=bool),
    "log_targets": Key(False, "fit log(1 + cost-to-go) instead of the raw value", kind=bool),
    "value_prior": Key(False, "fit the nets on top of the fixed-demand SoC cost-to-go", kind=bool),
    "refit_output": Key(True, "least-squares output layer after the optimiser", kind=bool),
    # baseline and compensation
    "baseline_soc_nodes": Key(401, "nodes", 2, 10**5, kind=int),
    "kappa": Key(-1.0, "g per unit SoC, negative = estimate", -1.0, 1e6),
    "kappa_spread": Key(0.005, "fraction, terminal SoC offsets for kappa", 0.0, 0.1, lo_open=True),
    # run
    "dt": Key(1.0, "s", 0.0, 60.0, lo_open=True),
    "seed": Key(0, "-", 0, 2**63 - 1, kind=int),
    "cycle": Key("", "path to t,v CSV", kind=str),
    "out_dir": Key("out", "path", kind=str),
    "cache_dir": Key("", "path, empty = no cache", kind=str),
}

_ORDERED_PAIRS = [
    ("dx_min", "dx_max"), ("dv_min", "dv_max"), ("soc_min", "soc_max"), ("dTd_min", "dTd_max"),
    ("r_s", "r_r"),
]


def _parse_value(raw: str, key: str, spec: Key, line: int, path):
    if spec.kind is str:
        return raw
    if spec.kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}", line, path)
    try:
        val = spec.kind(raw) if spec.kind is float else int(raw, 10)
    except ValueError:
        raise ConfigError(f"{key}: expected {spec.kind.__name__}, got {raw!r}", line, path) from None
    if spec.kind is float and not np.isfinite(val):
        raise ConfigError(f"{key}: value must be finite", line, path)
    return val


def _check_range(key: str, val, spec: Key, line, path):
    if spec.lo is None:
        return
    below = val <= spec.lo if spec.lo_open else val < spec.lo
    if below or val > spec.hi:
        lb = "(" if spec.lo_open else "["
        raise ConfigError(f"{key} = {val} outside {lb}{spec.lo}, {spec.hi}] ({spec.unit})", line, path)


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully populated, validated settings.  ``values`` maps every key in KEYS."""

    values: dict
    lines: dict  # key -> line number it was set on (absent for defaults)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return build_config({**self.values, **kw}, dict(self.lines))

    # model objects -----------------------------------------------------------------
    def model_params(self) -> ModelParams:
        veh = VehicleParams(m=self.m, r=self.r, A_f=self.A_f, rho=self.rho, C_drag=self.C_d,
                            mu_R=self.mu_R, g=self.g)
        pt = PowertrainParams(r_r=self.r_r, r_s=self.r_s, k_C=self.k_C, mu_m=self.mu_m, mu_g=self.mu_g)
        batt = BatteryParams(V_batt=self.V_batt, R_batt=self.R_batt, Q_batt=self.Q_batt)
        if self.fuel_map:
            fmap = FuelMap.from_csv(self.fuel_map, omega_max=self.omega_e_max)
        else:
            fmap = FuelMap.surrogate(eta=self.fuel_eta, q_lhv=self.fuel_lhv, idle=self.fuel_idle,
                                     omega_max=self.omega_e_max)
        return ModelParams(veh, pt, batt, fmap)

    def state_box(self) -> StateBox:
        return StateBox((self.dx_min, self.dv_min, self.soc_min), (self.dx_max, self.dv_max, self.soc_max))

    def state_grid(self) -> StateGrid:
        return StateGrid(self.state_box(), (self.n_dx, self.n_dv, self.n_soc))

    def input_grid(self) -> InputGrid:
        box = InputBox((0.0, self.omega_e_max), (self.dTd_min, self.dTd_max))
        return InputGrid.uniform(box, (self.n_omega, self.n_dTd))

    def penalty(self) -> TerminalPenalty:
        return TerminalPenalty(
            low=(self.dx_low, self.dv_low, self.soc_low),
            high=(self.dx_high, self.dv_high, self.soc_high),
            xmin=(self.dx_N_min, self.dv_N_min, self.soc_N_min),
            xmax=(self.dx_N_max, self.dv_N_max, self.soc_N_max),
            gamma=self.gamma_pen,
        )

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            samples=self.samples, alpha=self.alpha, iter_max=self.iter_max, lr=self.lr,
            lr_decay=self.lr_decay, optimizer=self.optimizer,
            batch_size=self.batch_size or None, hidden=self.hidden_layers, probe_size=self.probe_size,
            seed=self.seed, refit_output=self.refit_output,
        )

    def soc_grid(self) -> SocGrid:
        return SocGrid(self.soc_min, self.soc_max, self.baseline_soc_nodes)

    @property
    def hidden_layers(self) -> tuple:
        return tuple(int(h) for h in self.hidden.split(",") if h.strip())

    @property
    def x0(self) -> tuple:
        return (self.dx0, self.dv0, self.soc0)


def build_config(values: dict, lines: dict | None = None, path=None) -> ExperimentConfig:
    """Fill defaults, check ranges and cross-key consistency."""
    lines = dict(lines or {})
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", lines.get(unknown[0]), path)
    full = {k: spec.default for k, spec in KEYS.items()}
    for k, v in values.items():
        spec = KEYS[k]
        if spec.kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if spec.kind is int and isinstance(v, float) and v.is_integer():
            v = int(v)
        if not isinstance(v, spec.kind) or (spec.kind is int and isinstance(v, bool)):
            raise ConfigError(f"{k}: expected {spec.kind.__name__}, got {v!r}", lines.get(k), path)
        _check_range(k, v, spec, lines.get(k), path)
        full[k] = v

    def fail(msg, *keys):
        ln = max((lines[k] for k in keys if k in lines), default=None)
        raise ConfigError(msg, ln, path)

    for a, b in _ORDERED_PAIRS:
        if not full[a] < full[b]:
            fail(f"need {a} < {b}", a, b)
    for d, (mn, lo, hi, mx) in {
        "dx": ("dx_N_min", "dx_low", "dx_high", "dx_N_max"),
        "dv": ("dv_N_min", "dv_low", "dv_high", "dv_N_max"),
        "soc": ("soc_N_min", "soc_low", "soc_high", "soc_N_max"),
    }.items():
        if not full[mn] <= full[lo] <= full[hi] <= full[mx]:
            fail(f"need {mn} <= {lo} <= {hi} <= {mx}", mn, lo, hi, mx)
        if not (full[f"{d}_min"] <= full[mn] and full[mx] <= full[f"{d}_max"]):
            fail(f"terminal range for {d} must lie inside the state box", mn, mx, f"{d}_min", f"{d}_max")
    if not full["soc_min"] <= full["soc0"] <= full["soc_max"]:
        fail("soc0 outside the state box", "soc0")
    if full["log_targets"] and full["value_prior"]:
        fail("log_targets and value_prior cannot both be on", "log_targets", "value_prior")
    if full["optimizer"] not in ("lbfgs", "adam", "gd"):
        fail(f"optimizer must be lbfgs, adam or gd, got {full['optimizer']!r}", "optimizer")
    try:
        hidden = tuple(int(h) for h in full["hidden"].split(",") if h.strip())
    except ValueError:
        hidden = ()
    if not hidden or min(hidden) < 1:
        fail(f"hidden must be a comma list of positive layer widths, got {full['hidden']!r}", "hidden")
    cfg = ExperimentConfig(full, lines)
    try:
        cfg.model_params()
    except (ValueError, OSError) as exc:
        fail(str(exc), "fuel_map")
    return cfg


def parse_config_text(text: str, path=None) -> ExperimentConfig:
    values, lines = {}, {}
    for n, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", n, path)
        key, val = (s.strip() for s in body.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", n, path)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", n, path)
        values[key] = _parse_value(val, key, KEYS[key], n, path)
        lines[key] = n
    return build_config(values, lines, path)


def load_config(path=None) -> ExperimentConfig:
    """Read a config file; ``None`` gives all defaults."""
    if path is None:
        return build_config({})
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", None, p) from None
    return parse_config_text(text, p)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    width = max(len(k) for k in KEYS)
    return "".join(f"{k:<{width}} = {_fmt(cfg.values[k])}  # {KEYS[k].unit}\n" for k in KEYS)
