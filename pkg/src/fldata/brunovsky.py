"""Block-Brunovsky form, controllability of ``(A, B G)`` and the nominal
trajectory-membership check.

In transformed coordinates every channel is a chain of ``d_i`` unit delays
driven by the synthetic input ``v_i``.  With ``v ~= G Psi`` the dictionary
values enter through ``B G``; a full-row-rank ``G`` keeps the pair
controllable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import block_diag

from .errors import DimensionError, StructureError
from .trajectories import (DEFAULT_REL_TOL, SystemStructure, as_sequence, hankel,
                           is_persistently_exciting, numeric_rank)


@dataclass(frozen=True)
class BrunovskyTriple:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    structure: SystemStructure

    def step(self, xi, v) -> np.ndarray:
        return self.A @ np.asarray(xi, float) + self.B @ np.asarray(v, float)


def build_block_brunovsky(structure) -> BrunovskyTriple:
    """Block-diagonal shift realisation with blocks of size ``d_i``.

    Block ``i`` has ``A_i`` the upper shift, ``B_i`` the last unit column and
    ``C_i`` the first unit row.  Accepts a :class:`SystemStructure` or a list
    of relative degrees.
    """
    if not isinstance(structure, SystemStructure):
        try:
            structure = SystemStructure.from_degrees(structure)
        except (TypeError, ValueError) as exc:
            raise StructureError(f"invalid relative degrees {structure!r}: {exc}") from exc
    As, Bs, Cs = [], [], []
    for di in structure.d:
        As.append(np.eye(di, k=1))
        b = np.zeros((di, 1))
        b[-1, 0] = 1.0
        Bs.append(b)
        c = np.zeros((1, di))
        c[0, 0] = 1.0
        Cs.append(c)
    return BrunovskyTriple(block_diag(*As), block_diag(*Bs), block_diag(*Cs), structure)


@dataclass(frozen=True)
class ControllabilityDecision:
    controllable: bool
    rank: int
    n: int
    singular_values: np.ndarray = field(repr=False, default=None)

    def __bool__(self) -> bool:
        return self.controllable


def controllability_matrix(A, BG) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, float))
    BG = np.asarray(BG, float)
    if BG.ndim == 1:
        BG = BG[:, None]
    n = A.shape[0]
    if A.shape != (n, n) or BG.shape[0] != n:
        raise DimensionError(f"A must be square and BG must have {n} rows; got {A.shape}, {BG.shape}")
    blocks = [BG]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def is_controllable_pair(A, BG, rel_tol: float = DEFAULT_REL_TOL) -> ControllabilityDecision:
    """Rank test on ``[BG, A BG, ..., A^{n-1} BG]``."""
    Q = controllability_matrix(A, BG)
    n = Q.shape[0]
    rank, sv = numeric_rank(Q, rel_tol)
    return ControllabilityDecision(rank == n, rank, n, sv)


@dataclass
class TrajectoryDecision:
    is_trajectory: bool
    residual: float
    alpha: Optional[np.ndarray]
    pe_verified: bool
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"is_trajectory": self.is_trajectory, "residual": self.residual,
                "pe_verified": self.pe_verified, "flags": list(self.flags)}


def nominal_trajectory_check(psi_data, xi_data, psi_bar, xi_bar, L: int, tol: float = 1e-8,
                             rel_tol: float = DEFAULT_REL_TOL) -> TrajectoryDecision:
    """Is ``(psi_bar, xi_bar)`` in the column span of the stacked data Hankel matrices?

    ``psi_data`` holds ``N`` dictionary samples and ``xi_data`` the ``N+1``
    states; the candidate has ``L`` dictionary samples and ``L+1`` states.
    The least-squares ``alpha`` of ``[H_L(psi); H_{L+1}(xi)] alpha = [psi_bar; xi_bar]``
    is returned together with the infinity-norm residual.  When the data
    are not persistently exciting of order ``L + n`` the decision still
    stands but carries the ``"PE not verified"`` flag.
    """
    psi, xi = as_sequence(psi_data), as_sequence(xi_data)
    pb, xb = as_sequence(psi_bar), as_sequence(xi_bar)
    N, n = psi.shape[0], xi.shape[1]
    if xi.shape[0] < N + 1:
        raise StructureError(f"need N+1={N + 1} states for N={N} dictionary samples, got {xi.shape[0]}")
    if pb.shape != (L, psi.shape[1]):
        raise StructureError(f"candidate dictionary block must have shape ({L}, {psi.shape[1]}), got {pb.shape}")
    if xb.shape != (L + 1, n):
        raise StructureError(f"candidate states must have shape ({L + 1}, {n}), got {xb.shape}")
    if not 1 <= L <= N:
        raise DimensionError(f"L={L} out of range for N={N}")
    H = np.vstack([hankel(psi, L), hankel(xi[:N + 1], L + 1)])
    target = np.concatenate([pb.ravel(), xb.ravel()])
    alpha, *_ = np.linalg.lstsq(H, target, rcond=None)
    residual = float(np.max(np.abs(H @ alpha - target)))
    pe = is_persistently_exciting(psi, L + n, rel_tol)
    flags = [] if pe.is_pe else ["PE not verified"]
    return TrajectoryDecision(residual <= tol, residual, alpha, pe.is_pe, flags)
