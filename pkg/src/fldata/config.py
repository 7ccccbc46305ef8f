"""Flat, sectioned key-value experiment configuration.

Example::

    [plant]
    m1 = 1.0
    Ts = 0.1

    [simulation]
    L = 100
    lambda = 0.1

Unknown sections or keys are rejected so that typos do not silently fall
back to defaults.  Lists are comma separated.
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .basis import GridSpec
from .plant import OmegaBox, PendulumParams
from .solver import SolverConfig


class ConfigError(Exception):
    """Malformed or inconsistent configuration (CLI exit code 2)."""


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (attribute, parser)
_SCHEMA = {
    "plant": {k: (k, float) for k in ("m1", "m2", "l1", "l2", "g", "Ts")}
    | {"hanging": ("hanging", _bool)},
    "experiment": {"seed": ("seed", int), "dictionary": ("dictionary", str),
                   "perturbation": ("perturbation", float), "affine": ("affine", str),
                   "output_dir": ("output_dir", str)},
    "data": {"N": ("N", int), "w_star": ("w_star", float), "file": ("data_file", str)},
    "omega": {"tau_max": ("tau_max", _floats), "xi_max": ("xi_max", _floats)},
    "grid": {"points": ("grid_points", _ints), "validation_factor": ("validation_factor", int),
             "lipschitz_safety": ("lipschitz_safety", float)},
    "controller": {"kp": ("kp", float), "kd": ("kd", float), "dither": ("dither", float),
                   "tau_max": ("ctrl_tau_max", float)},
    "simulation": {"L": ("L", int), "lambda": ("lam", float)},
    "matching": {"L": ("match_L", int), "enabled": ("match_enabled", _bool)},
    "sweep": {"scales": ("sweep_scales", _floats), "seeds": ("sweep_seeds", int),
              "L": ("sweep_L", int), "enabled": ("sweep_enabled", _bool)},
    "bounds": {"K_Xi": ("user_K_Xi", float), "K_w": ("user_K_w", float)},
    "solver": {"grad_tol": ("grad_tol", float), "step_tol": ("step_tol", float),
               "max_iter": ("max_iter", int), "jacobian": ("jacobian", str),
               "feas_tol": ("feas_tol", float), "rank_tol": ("rank_tol", float)},
}


@dataclass(frozen=True)
class ExperimentConfig:
    # plant
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 0.5
    l2: float = 0.5
    g: float = 9.81
    Ts: float = 0.1
    hanging: bool = False
    # experiment
    seed: int = 0
    dictionary: str = "perturbed"      # "perturbed" or "exact"
    perturbation: float = 0.05
    affine: str = "folded"
    output_dir: str = "out"
    # data
    N: int = 500
    w_star: float = 0.01
    data_file: str = ""                # recorded CSV to use instead of collecting
    # omega
    tau_max: tuple = (20.0, 20.0)
    xi_max: tuple = (math.pi / 2,) * 4
    # grid
    grid_points: tuple = (5,)
    validation_factor: int = 10
    lipschitz_safety: float = 1.1
    # controller
    kp: float = 60.0
    kd: float = 10.0
    dither: float = 2.0
    ctrl_tau_max: float = 20.0
    # simulation / matching / sweep
    L: int = 100
    lam: float = 0.1
    match_L: int = 20
    match_enabled: bool = True
    sweep_scales: tuple = (1.0, 0.1, 0.01, 0.0)
    sweep_seeds: int = 10
    sweep_L: int = 10
    sweep_enabled: bool = False
    # user-supplied bound constants (make bounds advisory)
    user_K_Xi: float = float("nan")
    user_K_w: float = float("nan")
    # solver
    grad_tol: float = 1e-10
    step_tol: float = 1e-12
    max_iter: int = 200
    jacobian: str = "analytic"
    feas_tol: float = 1e-8
    rank_tol: float = 1e-8

    def __post_init__(self):
        problems = []
        if self.lam <= 0:
            problems.append(f"lambda must be > 0, got {self.lam}")
        if self.w_star < 0:
            problems.append(f"w_star must be >= 0, got {self.w_star}")
        if self.perturbation < 0:
            problems.append(f"perturbation must be >= 0, got {self.perturbation}")
        if self.N < 1 or self.L < 1 or self.match_L < 1 or self.sweep_L < 1:
            problems.append("N and all horizons must be positive")
        if self.dictionary not in ("perturbed", "exact"):
            problems.append(f"dictionary must be 'perturbed' or 'exact', got {self.dictionary!r}")
        if self.affine not in ("folded", "none", "append"):
            problems.append(f"affine must be folded, none or append, got {self.affine!r}")
        if self.jacobian not in ("analytic", "fd"):
            problems.append(f"jacobian must be 'analytic' or 'fd', got {self.jacobian!r}")
        if len(self.tau_max) not in (1, 2) or len(self.xi_max) not in (1, 4):
            problems.append("omega.tau_max needs 1 or 2 values and omega.xi_max 1 or 4")
        if len(self.grid_points) not in (1, 6):
            problems.append("grid.points needs 1 or 6 values")
        if self.sweep_seeds < 1:
            problems.append("sweep.seeds must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    # -- derived objects ------------------------------------------------------
    def plant_params(self) -> PendulumParams:
        try:
            return PendulumParams(self.m1, self.m2, self.l1, self.l2, self.g, self.Ts, self.hanging)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def box(self) -> OmegaBox:
        tau = np.broadcast_to(np.asarray(self.tau_max, float), (2,))
        xi = np.broadcast_to(np.asarray(self.xi_max, float), (4,))
        return OmegaBox(-tau, tau, -xi, xi)

    def grid(self) -> GridSpec:
        pts = self.grid_points * 6 if len(self.grid_points) == 1 else self.grid_points
        return GridSpec(pts)

    def solver(self) -> SolverConfig:
        return SolverConfig(grad_tol=self.grad_tol, step_tol=self.step_tol, max_iter=self.max_iter,
                            jacobian=self.jacobian, feas_tol=self.feas_tol, rank_tol=self.rank_tol)

    @property
    def user_bounds(self) -> bool:
        return not (math.isnan(self.user_K_Xi) and math.isnan(self.user_K_w))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    # -- text round trip --------------------------------------------------------
    def to_text(self) -> str:
        """Canonical text form (fixed section/key order, ``repr`` floats)."""
        lines = []
        for section, keys in _SCHEMA.items():
            lines.append(f"[{section}]")
            for key, (attr, _) in keys.items():
                lines.append(f"{key} = {_format(getattr(self, attr))}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keys are case sensitive (N, L, K_Xi, Ts)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    values = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            attr, conv = _SCHEMA[section][key]
            try:
                values[attr] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
