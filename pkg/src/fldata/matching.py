"""Output matching: find an input that makes the plant follow reference outputs.

The estimated input is a linear image of the recorded inputs,
``uhat = H_L(u) alpha*``, where ``alpha*`` solves a constrained nonlinear
least-squares problem analogous to the simulation problem.  The reference
states are known here, so the only nonlinearity is through the input slot of
the dictionary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import BasisDictionary, BoundParams
from .errors import DimensionError, EvaluationError, InfeasibleError, PlantOverflowError
from .plant import PendulumParams, inverse_transform_state, simulate_outputs
from .simulation import DataMatrices, error_bound, feasibility_rank
from .solver import ConstrainedNllsProblem, SolveResult, SolverConfig, solve
from .trajectories import Trajectory, state_sequence


@dataclass
class MatchingTask:
    data: Trajectory
    ybar: tuple
    dictionary: BasisDictionary
    bounds: BoundParams
    lam: float = 0.1

    def __post_init__(self):
        s = self.data.structure
        self.ybar = tuple(np.asarray(y, float).ravel() for y in self.ybar)
        if len(self.ybar) != s.m:
            raise DimensionError(f"expected {s.m} reference channels, got {len(self.ybar)}")
        lengths = {y.size - di for y, di in zip(self.ybar, s.d)}
        if len(lengths) != 1:
            raise DimensionError("reference channel i must have L + d_i samples for a common L")
        if not 1 <= self.L <= self.data.N:
            raise DimensionError(f"matching horizon L={self.L} must lie in [1, N={self.data.N}]")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not (self.dictionary.input_complete or self.dictionary.injective_in_u):
            raise ValueError("dictionary must contain the inputs or be injective in the input")

    @property
    def L(self) -> int:
        return self.ybar[0].size - self.data.structure.d[0]

    @property
    def xi_bar(self) -> np.ndarray:
        """Reference states ``Xi_bar_0..Xi_bar_L``, shape ``(L+1, n)``."""
        s = self.data.structure
        return state_sequence(self.ybar, s.d, self.L + 1)

    @property
    def reg_weight(self) -> float:
        return self.lam * self.bounds.nu


class MatchingResidual:
    """``[H_L(Psi) alpha - Psi(H_L(u) alpha, Xi_bar); H_{L+1}(Xi) alpha - Xi_bar]``."""

    def __init__(self, task: MatchingTask, mats: DataMatrices | None = None):
        self.task = task
        self.dictionary = task.dictionary
        self.mats = mats or DataMatrices(task.data, task.dictionary, task.L)
        self.xi_bar = task.xi_bar
        m = task.data.structure.m
        self.H_u_blocks = self.mats.H_u.reshape(task.L, m, -1)

    @property
    def size(self) -> int:
        L, n = self.task.L, self.task.data.structure.n
        return self.dictionary.r * L + n * (L + 1)

    def inputs(self, alpha) -> np.ndarray:
        return np.einsum("kmc,c->km", self.H_u_blocks, alpha)

    def __call__(self, alpha) -> np.ndarray:
        L = self.task.L
        try:
            psi_bar = self.dictionary.evaluate(self.inputs(alpha), self.xi_bar[:L])
        except EvaluationError as exc:
            raise EvaluationError(f"dictionary evaluation failed at k={exc.step}: state {exc.state}",
                                  step=exc.step, state=exc.state) from exc
        top = self.mats.H_psi @ alpha - psi_bar.ravel()
        bottom = self.mats.H_xi @ alpha - self.xi_bar.ravel()
        return np.concatenate([top, bottom])

    def jacobian(self, alpha) -> np.ndarray:
        L = self.task.L
        Ju = self.dictionary.jacobian_u(self.inputs(alpha), self.xi_bar[:L])  # (L, r, m)
        chain = np.einsum("krm,kmc->krc", Ju, self.H_u_blocks)
        top = self.mats.H_psi - chain.reshape(L * self.dictionary.r, -1)
        return np.vstack([top, self.mats.H_xi])


def build_matching_residual(task: MatchingTask) -> MatchingResidual:
    return MatchingResidual(task)


@dataclass
class MatchingOutcome:
    alpha_star: np.ndarray
    uhat: np.ndarray
    b: float
    bound: np.ndarray
    solve: SolveResult
    closed_loop: "ClosedLoopReport | None" = None
    diagnostics: dict = field(default_factory=dict)


def match_output(task: MatchingTask, config: SolverConfig = SolverConfig()) -> MatchingOutcome:
    res = MatchingResidual(task)
    mats = res.mats
    rank = feasibility_rank(mats.A_eq, config.rank_tol)
    problem = ConstrainedNllsProblem(res, mats.A_eq, res.xi_bar[0], task.reg_weight, res.jacobian)
    try:
        sr = solve(problem, config)
    except InfeasibleError as exc:
        raise InfeasibleError(f"reference initial state not reachable by the data: {exc} "
                              f"(constraint rank {rank} of {mats.A_eq.shape[0]})",
                              residual=exc.residual) from exc
    uhat = res.inputs(sr.alpha)
    bound = error_bound(np.arange(task.L), task.bounds, sr.alpha, sr.b, matching=True)
    diag = {"constraint_rank": rank, "converged": sr.converged, "iterations": sr.iterations,
            "alpha_l1": float(np.sum(np.abs(sr.alpha))),
            "bounds_advisory": not task.bounds.oracle_backed}
    return MatchingOutcome(sr.alpha, uhat, sr.b, bound, sr, None, diag)


@dataclass
class ClosedLoopReport:
    errors: tuple
    max_error: float
    within_bound: bool | None
    overflow_step: int | None = None

    def to_dict(self) -> dict:
        return {"max_error": self.max_error, "within_bound": self.within_bound,
                "overflow_step": self.overflow_step}


def verify_closed_loop(params: PendulumParams, uhat, xi0_bar, ybar: Sequence[np.ndarray],
                       bound: np.ndarray | None = None,
                       d: Sequence[int] = (2, 2)) -> ClosedLoopReport:
    """Apply ``uhat`` open loop to the benchmark plant from ``T^{-1}(xi0_bar)``.

    Returns ``e_i = ybar_i - y_i(uhat)`` per channel.  With ``bound`` given
    (values for ``e_{i,k+d_i}``, ``k = 0..L-1``) the report says whether
    every error lies within it.  A diverging plant is reported, not raised.
    """
    x0 = inverse_transform_state(np.asarray(xi0_bar, float), params.Ts)
    try:
        y = simulate_outputs(x0, uhat, params)
    except PlantOverflowError as exc:
        return ClosedLoopReport((), float("inf"), False if bound is not None else None, exc.step)
    errors = tuple(np.asarray(yb, float) - yi for yb, yi in zip(ybar, y))
    max_err = max(float(np.max(np.abs(e))) for e in errors)
    within = None
    if bound is not None:
        within = all(bool(np.all(np.abs(e[di:]) <= bound)) for e, di in zip(errors, d))
    return ClosedLoopReport(errors, max_err, within)
