"""Basis dictionaries, coefficient fitting over a gridded region and bound constants."""
from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import EstimationError, EvaluationError, LinearDependenceError
from .plant import OmegaBox, PendulumParams, acceleration_batch, manipulator_terms_batch
from .trajectories import DEFAULT_REL_TOL, numeric_rank

log = logging.getLogger(__name__)

FD_STEP = 1e-6


@dataclass(frozen=True)
class BasisDictionary:
    """Vector of ``r`` scalar functions ``psi_j(u, Xi)``.

    ``func`` maps batches ``(K, m), (K, n)`` to ``(K, r)``.  The optional
    Jacobians return ``(K, r, n)`` and ``(K, r, m)``; when absent, central
    differences are used.
    """

    m: int
    n: int
    r: int
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    names: tuple = ()
    jac_xi: Optional[Callable] = None
    jac_u: Optional[Callable] = None
    input_complete: bool = False
    injective_in_u: bool = False

    def evaluate(self, u, xi) -> np.ndarray:
        u, xi = np.asarray(u, float), np.asarray(xi, float)
        single = u.ndim == 1 and xi.ndim == 1
        U = u.reshape(-1, self.m)
        X = xi.reshape(-1, self.n)
        with np.errstate(all="ignore"):
            out = np.asarray(self.func(U, X), dtype=float)
        if not np.all(np.isfinite(out)):
            bad = int(np.argmin(np.all(np.isfinite(out), axis=1)))
            raise EvaluationError(f"dictionary not finite at sample {bad}", step=bad, state=X[bad])
        return out[0] if single else out

    __call__ = evaluate

    def jacobian_xi(self, u, xi) -> np.ndarray:
        U, X = np.reshape(u, (-1, self.m)), np.reshape(xi, (-1, self.n))
        if self.jac_xi is not None:
            return np.asarray(self.jac_xi(U, X))
        return _central_diff(lambda x: self.evaluate(U, x), X)

    def jacobian_u(self, u, xi) -> np.ndarray:
        U, X = np.reshape(u, (-1, self.m)), np.reshape(xi, (-1, self.n))
        if self.jac_u is not None:
            return np.asarray(self.jac_u(U, X))
        return _central_diff(lambda v: self.evaluate(v, X), U)

    def check_input_complete(self, u, xi) -> bool:
        """``psi_j(u, Xi) == u_j`` for ``j < m`` on the given samples."""
        P = self.evaluate(np.reshape(u, (-1, self.m)), np.reshape(xi, (-1, self.n)))
        return bool(np.array_equal(P[:, :self.m], np.reshape(u, (-1, self.m))))


def _central_diff(f, X, h=FD_STEP):
    K, p = X.shape
    cols = []
    for j in range(p):
        e = np.zeros(p)
        e[j] = h
        cols.append((f(X + e) - f(X - e)) / (2 * h))
    return np.stack(cols, axis=2)


def input_state_dictionary(m: int, n: int) -> BasisDictionary:
    """Linear dictionary ``[u; Xi]`` (r = m + n)."""
    r = m + n

    def jac_xi(U, X):
        J = np.zeros((U.shape[0], r, n))
        J[:, m:, :] = np.eye(n)
        return J

    def jac_u(U, X):
        J = np.zeros((U.shape[0], r, m))
        J[:, :m, :] = np.eye(m)
        return J

    names = tuple(f"u{j + 1}" for j in range(m)) + tuple(f"xi{j + 1}" for j in range(n))
    return BasisDictionary(m, n, r, lambda U, X: np.hstack([U, X]), names, jac_xi, jac_u,
                           input_complete=True, injective_in_u=True)


# -- pendulum dictionary -----------------------------------------------------

def _pendulum_psi_and_jacobians(U, X, p: PendulumParams):
    Ts = p.Ts
    q = X[:, [0, 2]]
    w = np.stack([(X[:, 1] - X[:, 0]) / Ts, (X[:, 3] - X[:, 2]) / Ts], axis=1)
    M, _, _ = manipulator_terms_batch(q, w, p)
    psi = acceleration_batch(q, w, U, p)
    Minv = np.linalg.inv(M)

    a = p.m2 * p.l1 * p.l2
    s2, c2 = np.sin(q[:, 1]), np.cos(q[:, 1])
    c1, c12 = np.cos(q[:, 0]), np.cos(q[:, 0] + q[:, 1])
    w1, w2 = w[:, 0], w[:, 1]
    h, dh = -a * s2, -a * c2
    K = U.shape[0]
    # derivatives of f = tau - C(q,w) w - G(q) and of M, per generalized coordinate
    g = -p.g if p.hanging else p.g
    dG_dq1 = np.stack([-g * ((p.m1 + p.m2) * p.l1 * c1 + p.m2 * p.l2 * c12),
                       -g * p.m2 * p.l2 * c12], axis=1)
    dG_dq2 = np.stack([-g * p.m2 * p.l2 * c12] * 2, axis=1)
    dc_dq2 = np.stack([dh * (2 * w1 * w2 + w2 ** 2), -dh * w1 ** 2], axis=1)
    dc_dw1 = np.stack([2 * h * w2, -2 * h * w1], axis=1)
    dc_dw2 = np.stack([h * (2 * w1 + 2 * w2), np.zeros(K)], axis=1)
    dM_dq2 = np.empty((K, 2, 2))
    dM_dq2[:, 0, 0] = -2 * a * s2
    dM_dq2[:, 0, 1] = dM_dq2[:, 1, 0] = -a * s2
    dM_dq2[:, 1, 1] = 0.0

    mv = lambda A, v: np.einsum("kij,kj->ki", A, v)
    d_q1 = mv(Minv, -dG_dq1)
    d_q2 = mv(Minv, -dc_dq2 - dG_dq2 - mv(dM_dq2, psi))
    d_w1 = mv(Minv, -dc_dw1)
    d_w2 = mv(Minv, -dc_dw2)
    Jx = np.stack([d_q1 - d_w1 / Ts, d_w1 / Ts, d_q2 - d_w2 / Ts, d_w2 / Ts], axis=2)
    return psi, Jx, Minv


def perturbed_pendulum_dictionary(p_est: PendulumParams, affine: str = "folded") -> BasisDictionary:
    """Computed-torque dictionary built from estimated pendulum parameters.

    The core entries are ``z_i = [M(q)^{-1}(tau - C(q, w) w - G(q))]_i`` with
    ``q = (xi1, xi3)`` and velocities ``w = ((xi2-xi1)/Ts, (xi4-xi3)/Ts)``.
    ``affine`` controls how the Euler part ``2 xi2 - xi1`` (resp.
    ``2 xi4 - xi3``) of the synthetic input is represented:

    * ``"folded"`` (default): ``psi_i = z_i + (2 xi_{2i} - xi_{2i-1}) / Ts^2``,
      so the exact-parameter dictionary satisfies ``Phi = Ts^2 Psi`` (r = 2);
    * ``"none"``: bare ``z_i`` (r = 2);
    * ``"append"``: ``[z; Xi]`` (r = 6).  Its data Hankel matrix is rank
      deficient by construction because ``xi2_k = xi1_{k+1}``.

    All variants are injective in ``tau`` for fixed ``Xi``.
    """
    if affine not in ("folded", "none", "append"):
        raise ValueError(f"unknown affine mode {affine!r}")
    Ts = p_est.Ts
    S = np.zeros((2, 4))
    S[0, :2] = (-1.0 / Ts ** 2, 2.0 / Ts ** 2)
    S[1, 2:] = (-1.0 / Ts ** 2, 2.0 / Ts ** 2)
    r = 6 if affine == "append" else 2

    def func(U, X):
        psi = acceleration_batch(X[:, [0, 2]], np.stack([(X[:, 1] - X[:, 0]) / Ts,
                                                         (X[:, 3] - X[:, 2]) / Ts], axis=1),
                                 U, p_est)
        if affine == "folded":
            return psi + X @ S.T
        return np.hstack([psi, X]) if affine == "append" else psi

    def jac_xi(U, X):
        _, Jx, _ = _pendulum_psi_and_jacobians(U, X, p_est)
        if affine == "folded":
            return Jx + S
        if affine == "none":
            return Jx
        J = np.zeros((U.shape[0], r, 4))
        J[:, :2] = Jx
        J[:, 2:] = np.eye(4)
        return J

    def jac_u(U, X):
        _, _, Minv = _pendulum_psi_and_jacobians(U, X, p_est)
        if affine != "append":
            return Minv
        J = np.zeros((U.shape[0], r, 2))
        J[:, :2] = Minv
        return J

    names = ("psi_1", "psi_2") + (("xi1", "xi2", "xi3", "xi4") if affine == "append" else ())
    return BasisDictionary(2, 4, r, func, names, jac_xi, jac_u,
                           input_complete=False, injective_in_u=True)


# -- grids and fitting -------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Per-dimension point counts over ``(u, Xi)`` (inputs first)."""

    points: tuple

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(int(v) for v in self.points))
        if any(v < 2 for v in self.points):
            raise ValueError(f"grid needs >= 2 points per dimension, got {self.points}")

    @classmethod
    def uniform(cls, per_dim: int, dims: int) -> "GridSpec":
        return cls((per_dim,) * dims)

    @property
    def total(self) -> int:
        return int(np.prod(self.points))


def grid_axes(box: OmegaBox, grid: GridSpec) -> list:
    lo, hi = box.lower, box.upper
    if len(grid.points) != lo.size:
        raise ValueError(f"grid has {len(grid.points)} dims, box has {lo.size}")
    return [np.linspace(a, b, k) for a, b, k in zip(lo, hi, grid.points)]


def grid_points(box: OmegaBox, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Tensor grid flattened to ``U (K, m)``, ``X (K, n)`` in C order."""
    mesh = np.meshgrid(*grid_axes(box, grid), indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    m = box.tau_lb.size
    return pts[:, :m], pts[:, m:]


@dataclass(frozen=True)
class CoefficientFit:
    G: np.ndarray
    eps_star: float
    row_rank: int
    grid: GridSpec
    validation_max: float = float("nan")
    validation_exceedances: int = 0

    @property
    def full_row_rank(self) -> bool:
        return self.row_rank == self.G.shape[0]

    def to_dict(self) -> dict:
        return {"G": self.G.tolist(), "eps_star": self.eps_star, "row_rank": self.row_rank,
                "full_row_rank": self.full_row_rank, "grid": list(self.grid.points),
                "validation_max": self.validation_max,
                "validation_exceedances": self.validation_exceedances}


def fit_coefficients(dictionary: BasisDictionary, phi, box: OmegaBox, grid: GridSpec,
                     validation_factor: int = 10, seed: int = 0,
                     rel_tol: float = DEFAULT_REL_TOL) -> CoefficientFit:
    """Least-squares coefficients of ``Phi ~ G Psi`` on a uniform grid of ``box``.

    ``eps_star`` is the largest grid residual in the infinity norm.  A
    uniform random validation sample ``validation_factor`` times the grid size
    reports residuals exceeding ``eps_star`` (a warning, not an error).
    """
    U, X = grid_points(box, grid)
    P = dictionary.evaluate(U, X)
    F = np.asarray(phi(U, X), dtype=float)
    rank, _ = numeric_rank(P, rel_tol)
    if rank < dictionary.r:
        _, _, piv = scipy.linalg.qr(P, mode="economic", pivoting=True)
        bad = [dictionary.names[j] if dictionary.names else f"psi_{j + 1}"
               for j in piv[rank:]]
        raise LinearDependenceError(
            f"dictionary is linearly dependent on the grid (rank {rank} < r={dictionary.r}); "
            f"dependent functions: {bad}")
    Gt, *_ = np.linalg.lstsq(P, F, rcond=None)
    G = Gt.T
    eps_star = float(np.max(np.abs(F - P @ Gt)))
    row_rank, _ = numeric_rank(G, rel_tol)

    vmax, exceed = float("nan"), 0
    if validation_factor:
        rng = np.random.default_rng(seed)
        K = validation_factor * grid.total
        pts = rng.uniform(box.lower, box.upper, size=(K, box.lower.size))
        m = dictionary.m
        res = np.abs(np.asarray(phi(pts[:, :m], pts[:, m:])) - dictionary.evaluate(pts[:, :m], pts[:, m:]) @ Gt)
        per_pt = res.max(axis=1)
        vmax, exceed = float(per_pt.max()), int(np.sum(per_pt > eps_star))
        if exceed:
            warnings.warn(f"{exceed} validation points exceed eps*={eps_star:.4g} "
                          f"(max {vmax:.4g}); grid supremum is an underestimate",
                          RuntimeWarning, stacklevel=2)
    return CoefficientFit(G, eps_star, row_rank, grid, vmax, exceed)


def g_inf_norm(fit_or_G) -> float:
    """Maximum absolute row sum of the coefficient matrix."""
    G = fit_or_G.G if isinstance(fit_or_G, CoefficientFit) else np.asarray(fit_or_G, float)
    G = np.atleast_2d(G)
    return float(np.max(np.sum(np.abs(G), axis=1))) if G.size else 0.0


def estimate_lipschitz(phi, box: OmegaBox, grid: GridSpec, w_star: float,
                       safety: float = 1.1) -> tuple[float, float]:
    """Grid estimates of ``K_Xi`` and ``K_w``, both inflated by ``safety``.

    ``K_Xi`` maximizes ``|Phi(u,Xi) - Phi(u,Xi')|_inf / |Xi - Xi'|_inf`` over
    grid neighbours (diagonals included) sharing ``u``.  ``K_w`` maximizes
    ``|delta(omega)|_inf / w*`` with ``delta(omega) = Phi(u,Xi) - Phi(u,Xi+omega)``
    over the ``2^n`` noise corners ``omega in {-w*, w*}^n``.
    """
    m = box.tau_lb.size
    n = box.xi_lb.size
    if any(k < 3 for k in grid.points[m:]):
        raise EstimationError(f"need >= 3 grid points per state dimension, got {grid.points[m:]}")
    axes = grid_axes(box, grid)
    h = np.array([ax[1] - ax[0] for ax in axes[m:]])
    if np.any(h <= 0):
        raise EstimationError("degenerate grid: zero-width state dimension")
    U, X = grid_points(box, grid)
    F = np.asarray(phi(U, X), dtype=float).reshape(*grid.points, -1)

    k_xi = 0.0
    nd = m + n
    for off in itertools.product((-1, 0, 1), repeat=n):
        off = np.array(off)
        nz = np.nonzero(off)[0]
        if nz.size == 0 or off[nz[0]] < 0:
            continue  # each unordered pair once
        base = [slice(None)] * m
        shifted = [slice(None)] * m
        for o in off:
            base.append(slice(max(0, -o), None if o <= 0 else -o))
            shifted.append(slice(max(0, o), None if o >= 0 else o))
        diff = np.abs(F[tuple(shifted)] - F[tuple(base)])
        denom = np.max(np.abs(off) * h)
        k_xi = max(k_xi, float(diff.max()) / denom)
    assert F.ndim == nd + 1

    k_w = 0.0
    if w_star > 0:
        F0 = F.reshape(-1, F.shape[-1])
        for signs in itertools.product((-1.0, 1.0), repeat=n):
            d = np.abs(F0 - np.asarray(phi(U, X + w_star * np.array(signs))))
            k_w = max(k_w, float(d.max()) / w_star)
    return safety * k_xi, safety * k_w


@dataclass(frozen=True)
class BoundParams:
    eps_star: float
    w_star: float
    K_Xi: float
    K_w: float
    g_inf: float
    oracle_backed: bool = True

    def __post_init__(self):
        for k in ("eps_star", "w_star", "K_Xi", "K_w", "g_inf"):
            if not getattr(self, k) >= 0:
                raise ValueError(f"{k} must be >= 0, got {getattr(self, k)}")

    @property
    def nu(self) -> float:
        return max(self.eps_star, self.w_star)

    def to_dict(self) -> dict:
        return {"eps_star": self.eps_star, "w_star": self.w_star, "K_Xi": self.K_Xi,
                "K_w": self.K_w, "g_inf": self.g_inf, "oracle_backed": self.oracle_backed}
