"""Euler-discretized fully-actuated double pendulum benchmark.

State ``x = [theta1, dtheta1, theta2, dtheta2]``, input ``tau`` (joint
torques), output ``y = [theta1, theta2]``.  Links are massless rods with point
masses at their ends; ``theta2`` is measured relative to link 1 and both
angles are zero at the upright equilibrium (``hanging=True`` flips the sign of
gravity so that zero is the downward rest position instead).

Functions whose names end in ``_batch`` take arrays with a leading sample
axis and are used by the grid/dictionary code.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import CollectionError, EvaluationError, PlantOverflowError, ProbeError
from .trajectories import SystemStructure, Trajectory

PENDULUM_STRUCTURE = SystemStructure(m=2, n=4, d=(2, 2))


@dataclass(frozen=True)
class PendulumParams:
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 0.5
    l2: float = 0.5
    g: float = 9.81
    Ts: float = 0.1
    hanging: bool = False

    def __post_init__(self):
        vals = {k: v for k, v in asdict(self).items() if k != "hanging"}
        if any(not np.isfinite(v) or v <= 0 for v in vals.values()):
            raise ValueError(f"pendulum parameters must be positive and finite: {vals}")
        if self.Ts >= 1:
            raise ValueError(f"sampling time must be < 1 s, got {self.Ts}")

    def perturbed(self, rel: float, rng: np.random.Generator) -> "PendulumParams":
        """Multiply ``m1, m2, l1, l2`` by ``1+eta``, ``eta ~ U(-rel, rel)``."""
        f = 1.0 + rng.uniform(-rel, rel, size=4)
        return replace(self, m1=self.m1 * f[0], m2=self.m2 * f[1],
                       l1=self.l1 * f[2], l2=self.l2 * f[3])


@dataclass(frozen=True)
class OmegaBox:
    """Axis-aligned box over (input, transformed state)."""

    tau_lb: np.ndarray
    tau_ub: np.ndarray
    xi_lb: np.ndarray
    xi_ub: np.ndarray

    def __post_init__(self):
        for name in ("tau_lb", "tau_ub", "xi_lb", "xi_ub"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if np.any(self.tau_lb > self.tau_ub) or np.any(self.xi_lb > self.xi_ub):
            raise ValueError("OmegaBox lower bounds must not exceed upper bounds")

    @classmethod
    def symmetric(cls, tau_max, xi_max) -> "OmegaBox":
        tau_max, xi_max = np.asarray(tau_max, float), np.asarray(xi_max, float)
        return cls(-tau_max, tau_max, -xi_max, xi_max)

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([self.tau_lb, self.xi_lb])

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([self.tau_ub, self.xi_ub])

    def contains(self, tau, xi, slack: float = 0.0) -> np.ndarray:
        tau, xi = np.atleast_2d(tau), np.atleast_2d(xi)
        ok_u = np.all((tau >= self.tau_lb - slack) & (tau <= self.tau_ub + slack), axis=1)
        ok_x = np.all((xi >= self.xi_lb - slack) & (xi <= self.xi_ub + slack), axis=1)
        return ok_u & ok_x

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("tau_lb", "tau_ub", "xi_lb", "xi_ub")}


def default_box() -> OmegaBox:
    return OmegaBox.symmetric([20.0, 20.0], [np.pi / 2] * 4)


# -- dynamics ----------------------------------------------------------------

def manipulator_terms_batch(theta, dtheta, p: PendulumParams):
    """Inertia ``M (K,2,2)``, Coriolis ``C (K,2,2)`` and gravity ``Gv (K,2)``."""
    theta = np.atleast_2d(theta)
    dtheta = np.atleast_2d(dtheta)
    t1, t2 = theta[:, 0], theta[:, 1]
    w1, w2 = dtheta[:, 0], dtheta[:, 1]
    c2, s2 = np.cos(t2), np.sin(t2)
    a = p.m2 * p.l1 * p.l2
    m22 = p.m2 * p.l2 ** 2
    m12 = m22 + a * c2
    m11 = (p.m1 + p.m2) * p.l1 ** 2 + m22 + 2 * a * c2
    K = theta.shape[0]
    M = np.empty((K, 2, 2))
    M[:, 0, 0], M[:, 0, 1], M[:, 1, 0], M[:, 1, 1] = m11, m12, m12, m22
    h = -a * s2
    C = np.empty((K, 2, 2))
    C[:, 0, 0], C[:, 0, 1] = h * w2, h * (w1 + w2)
    C[:, 1, 0], C[:, 1, 1] = -h * w1, 0.0
    s12 = np.sin(t1 + t2)
    g = -p.g if p.hanging else p.g
    Gv = np.empty((K, 2))
    Gv[:, 0] = -g * ((p.m1 + p.m2) * p.l1 * np.sin(t1) + p.m2 * p.l2 * s12)
    Gv[:, 1] = -g * p.m2 * p.l2 * s12
    return M, C, Gv


def manipulator_terms(theta, dtheta, p: PendulumParams):
    """Single-sample ``(M, C, Gv)``."""
    M, C, Gv = manipulator_terms_batch(np.reshape(theta, (1, 2)), np.reshape(dtheta, (1, 2)), p)
    return M[0], C[0], Gv[0]


def _solve2(M, rhs):
    """Closed-form batched 2x2 solve ``M^{-1} rhs``."""
    det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
    if np.any(det == 0) or not np.all(np.isfinite(det)):
        raise EvaluationError("singular inertia matrix")
    out = np.empty_like(rhs)
    out[:, 0] = (M[:, 1, 1] * rhs[:, 0] - M[:, 0, 1] * rhs[:, 1]) / det
    out[:, 1] = (M[:, 0, 0] * rhs[:, 1] - M[:, 1, 0] * rhs[:, 0]) / det
    return out


def acceleration_batch(theta, dtheta, tau, p: PendulumParams) -> np.ndarray:
    """``Z = M^{-1}(tau - C dtheta - Gv)``, shape ``(K, 2)``."""
    theta, dtheta, tau = np.atleast_2d(theta), np.atleast_2d(dtheta), np.atleast_2d(tau)
    M, C, Gv = manipulator_terms_batch(theta, dtheta, p)
    return _solve2(M, tau - np.einsum("kij,kj->ki", C, dtheta) - Gv)


def step(x, tau, p: PendulumParams) -> np.ndarray:
    """One Euler step ``x+ = x + Ts (A x + B Z)``."""
    x = np.asarray(x, dtype=float)
    z = acceleration_batch(x[[0, 2]], x[[1, 3]], np.asarray(tau, float), p)[0]
    return x + p.Ts * np.array([x[1], z[0], x[3], z[1]])


def rollout(x0, taus, p: PendulumParams) -> np.ndarray:
    """States ``x_0..x_K`` under inputs ``tau_0..tau_{K-1}``, shape ``(K+1, 4)``."""
    taus = np.atleast_2d(np.asarray(taus, dtype=float))
    xs = np.empty((taus.shape[0] + 1, 4))
    xs[0] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for k, tau in enumerate(taus):
            xs[k + 1] = step(xs[k], tau, p)
            if not np.all(np.isfinite(xs[k + 1])):
                raise PlantOverflowError(f"non-finite plant state at step {k}", step=k)
    return xs


def outputs_from_states(xs) -> np.ndarray:
    xs = np.atleast_2d(xs)
    return xs[:, [0, 2]]


def simulate_outputs(x0, taus, p: PendulumParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel outputs ``y_{i,0..K+d_i-1}`` for inputs ``tau_0..tau_{K-1}``.

    The last ``d_i - 1`` samples do not depend on the input applied there, so
    the rollout is padded with zero torque.
    """
    taus = np.atleast_2d(np.asarray(taus, dtype=float))
    pad = max(PENDULUM_STRUCTURE.d) - 1
    xs = rollout(x0, np.vstack([taus, np.zeros((pad, 2))]), p)
    y = outputs_from_states(xs)
    K = taus.shape[0]
    return tuple(y[:K + di, i].copy() for i, di in enumerate(PENDULUM_STRUCTURE.d))


def transform_state(x, Ts: float) -> np.ndarray:
    """``Xi = [x1, x1 + Ts x2, x3, x3 + Ts x4]`` (works on batches too)."""
    x = np.asarray(x, dtype=float)
    xi = np.empty_like(x)
    xi[..., 0] = x[..., 0]
    xi[..., 1] = x[..., 0] + Ts * x[..., 1]
    xi[..., 2] = x[..., 2]
    xi[..., 3] = x[..., 2] + Ts * x[..., 3]
    return xi


def inverse_transform_state(xi, Ts: float) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    x = np.empty_like(xi)
    x[..., 0] = xi[..., 0]
    x[..., 1] = (xi[..., 1] - xi[..., 0]) / Ts
    x[..., 2] = xi[..., 2]
    x[..., 3] = (xi[..., 3] - xi[..., 2]) / Ts
    return x


def exact_synthetic_input(x, tau, p: PendulumParams) -> np.ndarray:
    """Synthetic input ``v`` for state ``x`` and torque ``tau``.

    ``v_i = 2 xi_{2i} - xi_{2i-1} + Ts^2 z_i``; equals ``y_i`` two steps ahead.
    Accepts single samples or batches.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    z = acceleration_batch(x2[:, [0, 2]], x2[:, [1, 3]], np.atleast_2d(tau), p)
    xi = transform_state(x2, p.Ts)
    v = np.stack([2 * xi[:, 1] - xi[:, 0], 2 * xi[:, 3] - xi[:, 2]], axis=1) + p.Ts ** 2 * z
    return v[0] if single else v


def pendulum_phi(p: PendulumParams) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Ground-truth map ``Phi(u, Xi)`` for batches ``(K,2), (K,4) -> (K,2)``."""

    def phi(u, xi):
        u, xi = np.atleast_2d(u), np.atleast_2d(xi)
        return exact_synthetic_input(inverse_transform_state(xi, p.Ts), u, p)

    return phi


# -- plant objects -----------------------------------------------------------

@dataclass(frozen=True)
class DoublePendulum:
    """Immutable plant wrapper used by probes and data collection."""

    params: PendulumParams = field(default_factory=PendulumParams)
    n_states: int = 4
    n_inputs: int = 2

    def step(self, x, u) -> np.ndarray:
        return step(x, u, self.params)

    def output(self, x) -> np.ndarray:
        return np.asarray(x)[[0, 2]]

    def to_xi(self, x) -> np.ndarray:
        return transform_state(x, self.params.Ts)

    def from_xi(self, xi) -> np.ndarray:
        return inverse_transform_state(xi, self.params.Ts)


@dataclass(frozen=True)
class RelativeDegreeProbe:
    degrees: list
    responses: np.ndarray
    assumption_ok: bool


def estimate_relative_degrees(plant, probe_amplitude: float = 1.0, threshold: float = 1e-12,
                              horizon: int | None = None) -> RelativeDegreeProbe:
    """Probe relative degrees by stepping each input from rest.

    For every input channel ``j`` a constant input of the given amplitude is
    applied from ``x = 0``; ``d_i`` is the first step at which any such probe
    moves output ``i`` beyond ``threshold``.  The default horizon is
    ``n_states + 1``: relative degrees sum to at most the state dimension, and
    longer probes of an unstable plant only invite overflow.
    """
    m = plant.n_inputs
    if horizon is None:
        horizon = plant.n_states + 1
    first = np.full(m, np.inf)
    responses = []
    for j in range(m):
        u = np.zeros(m)
        u[j] = probe_amplitude
        x = np.zeros(plant.n_states)
        ys = [plant.output(x)]
        for _ in range(horizon):
            x = plant.step(x, u)
            ys.append(plant.output(x))
        ys = np.abs(np.array(ys))
        responses.append(ys)
        for i in range(m):
            hit = np.nonzero(ys[:, i] > threshold)[0]
            if hit.size:
                first[i] = min(first[i], hit[0])
    if not np.all(np.isfinite(first)):
        silent = [i + 1 for i in range(m) if not np.isfinite(first[i])]
        raise ProbeError(f"outputs {silent} did not respond within {horizon} steps")
    d = [int(v) for v in first]
    return RelativeDegreeProbe(d, np.array(responses), sum(d) == plant.n_states)


@dataclass(frozen=True)
class PrestabilizingController:
    """Computed-torque joint tracker built on an (inexact) parameter estimate.

    ``tau = M_est (kp (r - theta) - kd dtheta) + C_est dtheta + G_est + dither``
    with per-joint two-tone references ``r`` and saturation at ``tau_max``.
    ``kp``/``kd`` are acceleration-level gains; the Euler closed loop of each
    joint has characteristic polynomial ``s^2 - (2 - Ts kd) s + 1 - Ts kd + Ts^2 kp``.
    """

    model: PendulumParams
    kp: float = 60.0
    kd: float = 10.0
    amplitudes: tuple = ((0.35, 0.2), (0.3, 0.2))
    frequencies: tuple = ((0.11, 0.37), (0.17, 0.53))
    dither: float = 2.0
    tau_max: float = 20.0
    seed: int = 0

    def reference(self, k: int) -> np.ndarray:
        t = k * self.model.Ts
        return np.array([sum(a * np.sin(2 * np.pi * f * t) for a, f in zip(amp, fr))
                         for amp, fr in zip(self.amplitudes, self.frequencies)])

    def dither_sequence(self, N: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(1)[0])
        return rng.uniform(-self.dither, self.dither, size=(N, 2))

    def __call__(self, k: int, x, dither=None) -> np.ndarray:
        x = np.asarray(x, float)
        th, w = x[[0, 2]], x[[1, 3]]
        M, C, Gv = manipulator_terms(th, w, self.model)
        acc = self.kp * (self.reference(k) - th) - self.kd * w
        tau = M @ acc + C @ w + Gv
        if dither is not None:
            tau = tau + dither
        return np.clip(tau, -self.tau_max, self.tau_max)

    def to_dict(self) -> dict:
        return {"kp": self.kp, "kd": self.kd, "amplitudes": [list(a) for a in self.amplitudes],
                "frequencies": [list(f) for f in self.frequencies], "dither": self.dither,
                "tau_max": self.tau_max, "seed": self.seed, "model": asdict(self.model)}


def run_closed_loop(plant: DoublePendulum, controller, N: int, x0=None):
    """Closed-loop states ``x_0..x_{N+pad}`` and torques ``tau_0..tau_{N-1}``.

    The rollout continues ``max(d)-1`` extra steps with zero torque so that all
    outputs ``y_{i,0..N+d_i-1}`` are available.
    """
    x = np.zeros(4) if x0 is None else np.asarray(x0, float)
    pad = max(PENDULUM_STRUCTURE.d) - 1
    dith = controller.dither_sequence(N) if getattr(controller, "dither", 0) else None
    xs = np.empty((N + pad + 1, 4))
    taus = np.empty((N, 2))
    xs[0] = x
    for k in range(N + pad):
        tau = controller(k, xs[k], None if dith is None else dith[k]) if k < N else np.zeros(2)
        if k < N:
            taus[k] = tau
        with np.errstate(over="ignore", invalid="ignore"):
            xs[k + 1] = plant.step(xs[k], tau)
        if not np.all(np.isfinite(xs[k + 1])):
            raise PlantOverflowError(f"non-finite plant state at step {k}", step=k)
    return xs, taus


def collect_data(plant: DoublePendulum, controller, N: int, w_star: float, seed: int,
                 box: OmegaBox | None = None) -> Trajectory:
    """Closed-loop data with outputs corrupted by i.i.d. ``U(-w*, w*)`` noise.

    Raises :class:`CollectionError` at the first step whose (noiseless)
    input/transformed state leaves ``box``.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    xs, taus = run_closed_loop(plant, controller, N)
    if box is not None:
        xi = transform_state(xs[:N], plant.params.Ts)
        inside = box.contains(taus, xi)
        if not np.all(inside):
            k = int(np.argmin(inside))
            raise CollectionError(f"trajectory leaves Omega at step {k}", step=k)
    y = outputs_from_states(xs)
    streams = np.random.SeedSequence(seed).spawn(PENDULUM_STRUCTURE.m)
    outs = []
    for i, di in enumerate(PENDULUM_STRUCTURE.d):
        rng = np.random.default_rng(streams[i])
        noise = rng.uniform(-w_star, w_star, size=N + di) if w_star > 0 else 0.0
        outs.append(y[:N + di, i] + noise)
    meta = {"seed": seed, "w_star": w_star, "Ts": plant.params.Ts,
            "params": asdict(plant.params), "controller": controller.to_dict(),
            "omega": box.to_dict() if box is not None else None,
            "true_states": xs}
    return Trajectory(taus, tuple(outs), PENDULUM_STRUCTURE, meta)
