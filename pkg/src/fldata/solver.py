"""Equality-constrained, ridge-regularized nonlinear least squares.

Minimizes ``||rho(alpha)||^2 + w ||alpha||^2`` subject to ``A alpha = b``.  The
constraint is eliminated with ``alpha = alpha_p + Z beta`` (least-norm
particular solution plus orthonormal null-space basis), after which a
Levenberg-Marquardt iteration runs on ``beta``.  The ridge term enters as the
extra residual rows ``sqrt(w) alpha``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InfeasibleError, JacobianMismatchError
from .trajectories import DEFAULT_REL_TOL

log = logging.getLogger(__name__)

# relative size of objective changes lost to rounding
_NOISE = 64 * np.finfo(float).eps


@dataclass(frozen=True)
class SolverConfig:
    grad_tol: float = 1e-10
    step_tol: float = 1e-12
    max_iter: int = 200
    jacobian: str = "analytic"  # or "fd"
    fd_step: float = 1e-6
    feas_tol: float = 1e-8
    rank_tol: float = DEFAULT_REL_TOL
    check_jacobian: bool = True
    jac_check_tol: float = 1e-4
    damping0: float = 1e-3

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ConstrainedNllsProblem:
    residual: Callable[[np.ndarray], np.ndarray]
    A_eq: np.ndarray
    b_eq: np.ndarray
    reg_weight: float = 0.0
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.A_eq = np.atleast_2d(np.asarray(self.A_eq, float))
        self.b_eq = np.asarray(self.b_eq, float).ravel()
        if self.reg_weight < 0:
            raise ValueError(f"reg_weight must be >= 0, got {self.reg_weight}")

    def objective(self, alpha) -> float:
        rho = self.residual(alpha)
        return float(rho @ rho + self.reg_weight * (alpha @ alpha))


@dataclass
class SolveResult:
    alpha: np.ndarray
    objective: float
    b: float
    b_raw: float
    iterations: int
    converged: bool
    constraint_violation: float
    grad_norm: float
    objective_start: float
    message: str = ""
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"objective": self.objective, "b": self.b, "b_raw": self.b_raw,
                "iterations": self.iterations, "converged": self.converged,
                "constraint_violation": self.constraint_violation,
                "grad_norm": self.grad_norm, "objective_start": self.objective_start,
                "message": self.message}


def feasible_parameterization(A_eq, b_eq, rel_tol: float = DEFAULT_REL_TOL,
                              feas_tol: float = 1e-8):
    """Least-norm solution and orthonormal null-space basis of ``A_eq``.

    Every feasible point is ``alpha_p + Z @ beta``.  Rank-deficient but
    consistent systems are accepted.
    """
    A = np.atleast_2d(np.asarray(A_eq, float))
    b = np.asarray(b_eq, float).ravel()
    if A.shape[0] != b.size:
        raise ValueError(f"A_eq has {A.shape[0]} rows but b_eq has {b.size} entries")
    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(s > rel_tol * s[0])) if s.size and s[0] > 0 else 0
    coef = (U[:, :rank].T @ b) / s[:rank]
    alpha_p = Vt[:rank].T @ coef
    resid = float(np.linalg.norm(A @ alpha_p - b))
    scale = max(1.0, float(np.linalg.norm(b)))
    if resid > feas_tol * scale:
        raise InfeasibleError(
            f"equality constraint is inconsistent (least-squares residual {resid:.3e}); "
            f"check that the constraint matrix has full row rank", residual=resid)
    Z = Vt[rank:].T
    return alpha_p, Z


def fd_jacobian(fun, x, h=1e-6):
    f0 = fun(x)
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return J


def _check_jacobian(problem, alpha, J, config, rng):
    # directional derivatives along a few random directions
    for _ in range(3):
        v = rng.standard_normal(alpha.size)
        v /= np.linalg.norm(v)
        h = config.fd_step * max(1.0, np.linalg.norm(alpha))
        fd = (problem.residual(alpha + h * v) - problem.residual(alpha - h * v)) / (2 * h)
        an = J @ v
        err = np.linalg.norm(fd - an) / max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
        if err > config.jac_check_tol:
            raise JacobianMismatchError(
                f"analytic Jacobian disagrees with finite differences (rel err {err:.2e})")


def solve(problem: ConstrainedNllsProblem, config: SolverConfig = SolverConfig(),
          alpha0: Optional[np.ndarray] = None) -> SolveResult:
    """Levenberg-Marquardt on the constraint-eliminated problem.

    Starts from the projection of ``alpha0`` onto the feasible set, or from
    the least-norm feasible point.  Non-convergence is reported through
    ``converged=False`` rather than raised.
    """
    alpha_p, Z = feasible_parameterization(problem.A_eq, problem.b_eq, config.rank_tol,
                                           config.feas_tol)
    w = problem.reg_weight
    sw = np.sqrt(w)
    p = Z.shape[1]

    if problem.jacobian is not None and config.jacobian == "analytic":
        jac_alpha = problem.jacobian
    else:
        jac_alpha = lambda a: fd_jacobian(problem.residual, a, config.fd_step)

    def resid(alpha):
        rho = problem.residual(alpha)
        return np.concatenate([rho, sw * alpha]) if w > 0 else rho

    def jac(alpha):
        Jr = jac_alpha(alpha) @ Z
        return np.vstack([Jr, sw * Z]) if w > 0 else Jr

    beta = np.zeros(p) if alpha0 is None else Z.T @ (np.asarray(alpha0, float) - alpha_p)
    alpha = alpha_p + Z @ beta
    r = resid(alpha)
    F = float(r @ r)
    F0 = F
    history = [F]
    if p == 0:
        return _result(problem, alpha, 0, True, 0.0, F0, "feasible set is a single point", history)

    J = jac(alpha)
    if problem.jacobian is not None and config.jacobian == "analytic" and config.check_jacobian:
        _check_jacobian(problem, alpha, jac_alpha(alpha), config, np.random.default_rng(0))

    g = J.T @ r
    mu = config.damping0 * max(float(np.max(np.sum(J * J, axis=0))), 1e-300)
    nu = 2.0
    converged, message = False, "max_iter reached"
    it = 0
    while it < config.max_iter:
        gnorm = _scaled_gradient(J, r, g)
        if gnorm <= config.grad_tol or F == 0.0:
            converged, message = True, "gradient tolerance"
            break
        it += 1
        A = np.vstack([J, np.sqrt(mu) * np.eye(p)])
        rhs = np.concatenate([-r, np.zeros(p)])
        delta, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        if np.linalg.norm(delta) <= config.step_tol * (np.linalg.norm(beta) + config.step_tol):
            converged, message = True, "step tolerance"
            break
        beta_new = beta + delta
        alpha_new = alpha_p + Z @ beta_new
        r_new = resid(alpha_new)
        F_new = float(r_new @ r_new)
        Jd = J @ delta
        predicted = -(2 * float(delta @ g) + float(Jd @ Jd))
        actual = F - F_new
        gain = actual / predicted if predicted > 0 else -1.0
        J_new = None
        if not (gain > 0 and F_new <= F) and np.isfinite(F_new) and 0 < predicted <= _NOISE * F:
            # the objective cannot resolve this step; judge it by the gradient instead
            J_new = jac(alpha_new)
            if _scaled_gradient(J_new, r_new, J_new.T @ r_new) < gnorm:
                gain = 1.0
        if gain > 0 and np.isfinite(F_new) and (F_new <= F or J_new is not None):
            beta, alpha, r, F = beta_new, alpha_new, r_new, F_new
            history.append(F)
            J = jac(alpha) if J_new is None else J_new
            g = J.T @ r
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
            nu = 2.0
        else:
            mu *= nu
            nu *= 2.0
            if not np.isfinite(mu) or mu > 1e300:
                message = "damping overflow"
                break
    grad = _scaled_gradient(J, r, g)
    return _result(problem, alpha, it, converged, grad, F0, message, history)


def _scaled_gradient(J, r, g) -> float:
    """Largest cosine between ``r`` and a Jacobian column (MINPACK ``gtol`` test)."""
    denom = np.linalg.norm(J, axis=0) * np.linalg.norm(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(denom > 0, np.abs(g) / denom, 0.0)
    return float(np.max(c)) if c.size else 0.0


def _result(problem, alpha, it, converged, grad, F0, message, history):
    rho = problem.residual(alpha)
    b_raw = float(rho @ rho)
    J = b_raw + problem.reg_weight * float(alpha @ alpha)
    if b_raw < 0:
        log.warning("negative residual mass %g clipped to 0", b_raw)
    viol = float(np.max(np.abs(problem.A_eq @ alpha - problem.b_eq))) if problem.b_eq.size else 0.0
    return SolveResult(alpha, J, max(b_raw, 0.0), b_raw, it, converged, viol, grad, F0,
                       message, history)
