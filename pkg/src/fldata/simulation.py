"""Data-based simulation from noisy input-output data, with its error bound."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .basis import BasisDictionary, BoundParams
from .errors import DimensionError, EvaluationError, InfeasibleError
from .solver import ConstrainedNllsProblem, SolveResult, SolverConfig, solve
from .trajectories import (DEFAULT_REL_TOL, Trajectory, as_sequence, build_state_sequence,
                           hankel, is_persistently_exciting, numeric_rank)


@dataclass
class SimulationTask:
    data: Trajectory
    ubar: np.ndarray
    xi0_bar: np.ndarray
    dictionary: BasisDictionary
    bounds: BoundParams
    lam: float = 0.1

    def __post_init__(self):
        self.ubar = as_sequence(self.ubar)
        self.xi0_bar = np.asarray(self.xi0_bar, float).ravel()
        s = self.data.structure
        if self.ubar.shape[1] != s.m:
            raise DimensionError(f"ubar must have {s.m} columns, got {self.ubar.shape[1]}")
        if not 1 <= self.L <= self.data.N:
            raise DimensionError(f"simulation horizon L={self.L} must lie in [1, N={self.data.N}]")
        if self.xi0_bar.size != s.n:
            raise DimensionError(f"initial state must have n={s.n} entries")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")

    @property
    def L(self) -> int:
        return self.ubar.shape[0]

    @property
    def reg_weight(self) -> float:
        return self.lam * self.bounds.nu


class DataMatrices:
    """Hankel matrices of the recorded data shared by both problems."""

    def __init__(self, data: Trajectory, dictionary: BasisDictionary, L: int):
        self.data = data
        self.L = L
        N = data.N
        self.cols = N - L + 1
        self.xi = build_state_sequence(data)                       # (N+1, n)
        self.psi = dictionary.evaluate(data.inputs, self.xi[:N])   # (N, r)
        self.H_psi = hankel(self.psi, L)                           # (rL, cols)
        self.H_xi = hankel(self.xi, L + 1)                         # (n(L+1), cols)
        self.H_u = hankel(data.inputs, L)                          # (mL, cols)
        n = data.structure.n
        self.H_xi_blocks = self.H_xi.reshape(L + 1, n, self.cols)
        self.A_eq = self.H_xi_blocks[0]

    def states(self, alpha) -> np.ndarray:
        """``Xi_hat_k = H_1(Xi~_[k, k+N-L]) alpha`` for ``k = 0..L``."""
        return self.H_xi_blocks @ alpha if alpha.ndim == 1 else np.einsum("knc,c->kn", self.H_xi_blocks, alpha)

    def outputs(self, alpha) -> tuple:
        """``yhat_i = H_{L+d_i}(y~_i) alpha`` per channel."""
        return tuple(hankel(y, self.L + di) @ alpha
                     for y, di in zip(self.data.outputs, self.data.structure.d))


class SimulationResidual:
    """``H(alpha) = H_L(Psi(u, Xi~)) alpha - Psi(ubar, H_{L+1}(Xi~) alpha)``."""

    def __init__(self, task: SimulationTask, mats: DataMatrices | None = None):
        self.task = task
        self.dictionary = task.dictionary
        self.mats = mats or DataMatrices(task.data, task.dictionary, task.L)

    @property
    def size(self) -> int:
        return self.dictionary.r * self.task.L

    def _psi_bar(self, xs):
        try:
            return self.dictionary.evaluate(self.task.ubar, xs)
        except EvaluationError as exc:
            raise EvaluationError(f"dictionary evaluation failed at k={exc.step}: state {exc.state}",
                                  step=exc.step, state=exc.state) from exc

    def __call__(self, alpha) -> np.ndarray:
        L = self.task.L
        xs = self.mats.states(alpha)[:L]
        return self.mats.H_psi @ alpha - self._psi_bar(xs).ravel()

    def jacobian(self, alpha) -> np.ndarray:
        L = self.task.L
        xs = self.mats.states(alpha)[:L]
        Jx = self.dictionary.jacobian_xi(self.task.ubar, xs)               # (L, r, n)
        chain = np.einsum("krn,knc->krc", Jx, self.mats.H_xi_blocks[:L])  # (L, r, cols)
        return self.mats.H_psi - chain.reshape(L * self.dictionary.r, -1)


def forward_sweep_start(res: SimulationResidual, rel_tol: float = DEFAULT_REL_TOL):
    """Causal warm start for the simulation problem.

    Row block ``k`` of the residual involves the estimated states up to
    ``Xi_k`` only.  Sweeping ``k = 0..L-1`` and, at each step, moving
    ``alpha`` (within the constraint set, by a least-norm correction) so that
    block ``k`` is zero reproduces the one-step data-based recursion.  Solving
    the whole problem from scratch instead is prone to poor local minima.
    Returns ``None`` if the sweep leaves the dictionary's domain.
    """
    from .solver import feasible_parameterization

    mats, d = res.mats, res.dictionary
    try:
        alpha_p, Z = feasible_parameterization(mats.A_eq, res.task.xi0_bar, rel_tol)
    except InfeasibleError:
        return None
    if Z.shape[1] == 0:
        return alpha_p
    P = Z @ np.linalg.pinv(mats.H_psi @ Z)
    a = alpha_p.copy()
    r = d.r
    with np.errstate(all="ignore"):
        for k in range(res.task.L):
            x = mats.H_xi_blocks[k] @ a
            rows = slice(k * r, (k + 1) * r)
            try:
                target = d.evaluate(res.task.ubar[k:k + 1], x[None])[0]
            except EvaluationError:
                return None
            a = a + P[:, rows] @ (target - mats.H_psi[rows] @ a)
            if not np.all(np.isfinite(a)):
                return None
    return a


def build_simulation_residual(task: SimulationTask) -> SimulationResidual:
    return SimulationResidual(task)


def bound_polynomial(k, K_xi: float) -> np.ndarray:
    """``P^k(K) = K^k + ... + K + 1`` (elementwise in ``k``)."""
    k = np.asarray(k)
    if K_xi == 1.0:
        return k + 1.0
    kk = np.arange(int(np.max(k)) + 1)
    cums = np.cumsum(np.power(float(K_xi), kk))
    return cums[k]


def error_bound(k, bounds: BoundParams, alpha_star, b: float, matching: bool = False):
    """Bound on ``|e_{i,k+d_i}|`` for simulation or (``matching=True``) output matching.

    The residual coefficient is ``||G||_inf`` for simulation and
    ``||G||_inf + 1`` for matching.  Identical for every channel ``i``.
    """
    if b < 0:
        raise ValueError(f"residual mass b must be non-negative, got {b}")
    a1 = float(np.sum(np.abs(alpha_star)))
    coef = bounds.g_inf + (1.0 if matching else 0.0)
    base = (bounds.eps_star * (1 + a1) + coef * np.sqrt(b)
            + bounds.w_star * (1 + bounds.K_w) * a1)
    return bound_polynomial(k, bounds.K_Xi) * base


def feasibility_rank(A_eq, rel_tol: float = DEFAULT_REL_TOL) -> int:
    return numeric_rank(A_eq, rel_tol)[0]


@dataclass
class SimulationOutcome:
    alpha_star: np.ndarray
    yhat: tuple
    b: float
    bound: np.ndarray            # (L,) values for e_{i,k+d_i}, k = 0..L-1
    solve: SolveResult
    pe: object = None
    diagnostics: dict = field(default_factory=dict)

    def channel_bounds(self, d: Sequence[int]) -> tuple:
        """Bound aligned with ``yhat_i``: zeros on the first ``d_i`` samples."""
        return tuple(np.concatenate([np.zeros(di), self.bound]) for di in d)


def _check_feasible(mats: DataMatrices, rel_tol: float):
    rank = feasibility_rank(mats.A_eq, rel_tol)
    if rank < mats.A_eq.shape[0]:
        return {"constraint_rank": rank, "constraint_full_row_rank": False}
    return {"constraint_rank": rank, "constraint_full_row_rank": True}


def _pin_initial_windows(yhat, xi0_bar, structure):
    """Replace the first ``d_i`` samples of each estimate by the constrained values.

    They equal ``xi0_bar`` by the equality constraint; the raw linear images
    differ from it only by rounding, whose size is returned.
    """
    out, dev = [], 0.0
    for y, off, di in zip(yhat, structure.offsets, structure.d):
        y = np.array(y)
        dev = max(dev, float(np.max(np.abs(y[:di] - xi0_bar[off:off + di]))))
        y[:di] = xi0_bar[off:off + di]
        out.append(y)
    return tuple(out), dev


def simulate(task: SimulationTask, config: SolverConfig = SolverConfig(),
             check_pe: bool = True, warm_start: bool = True) -> SimulationOutcome:
    """Estimate the response to ``ubar`` from ``xi0_bar`` using the recorded data.

    With ``warm_start`` the problem is solved twice, from the least-norm
    feasible point and from :func:`forward_sweep_start`, and the lower
    objective wins.
    """
    res = SimulationResidual(task)
    mats = res.mats
    diag = _check_feasible(mats, config.rank_tol)
    problem = ConstrainedNllsProblem(res, mats.A_eq, task.xi0_bar, task.reg_weight, res.jacobian)
    start = forward_sweep_start(res, config.rank_tol) if warm_start else None
    try:
        sr, origin = solve(problem, config), "least_norm"
        if start is not None:
            warm = solve(problem, config, alpha0=start)
            if warm.objective < sr.objective:
                sr, origin = warm, "forward_sweep"
    except InfeasibleError as exc:
        raise InfeasibleError(
            f"initial condition not reachable by the data: {exc} "
            f"(constraint rank {diag['constraint_rank']} of {mats.A_eq.shape[0]})",
            residual=exc.residual) from exc
    yhat, init_dev = _pin_initial_windows(mats.outputs(sr.alpha), task.xi0_bar, task.data.structure)
    bound = error_bound(np.arange(task.L), task.bounds, sr.alpha, sr.b)
    pe = None
    if check_pe:
        pe = is_persistently_exciting(mats.psi, task.L + task.data.structure.n, config.rank_tol)
    diag.update({"start": origin, "converged": sr.converged, "iterations": sr.iterations,
                 "alpha_l1": float(np.sum(np.abs(sr.alpha))),
                 "initial_window_deviation": init_dev,
                 "bounds_advisory": not task.bounds.oracle_backed})
    return SimulationOutcome(sr.alpha, yhat, sr.b, bound, sr, pe, diag)


@dataclass
class SweepRow:
    scale: float
    median_error: float
    errors: list
    pe_verified: bool
    note: str = ""


def nu_sweep(make_task: Callable, scales: Sequence[float], seeds: Sequence[int],
             config: SolverConfig = SolverConfig()) -> list:
    """Median simulation error per noise/perturbation scale.

    ``make_task(scale, seed)`` returns ``(task, ybar)`` with ``ybar`` the true
    per-channel outputs.  Error is ``max_i |ybar_i - yhat_i|_inf``.
    """
    rows = []
    for scale in scales:
        errs, pe_ok = [], True
        for seed in seeds:
            task, ybar = make_task(scale, seed)
            out = simulate(task, config)
            errs.append(max(float(np.max(np.abs(yb - yh))) for yb, yh in zip(ybar, out.yhat)))
            pe_ok &= bool(out.pe is not None and out.pe.is_pe)
        note = "" if pe_ok else "data not persistently exciting; convergence is not guaranteed"
        rows.append(SweepRow(float(scale), float(np.median(errs)), errs, pe_ok, note))
    return rows
