"""Sequences, windows, Hankel matrices and persistency of excitation.

Sequences are stored as 2-D arrays of shape ``(N, eta)``: row ``k`` is the
sample ``z_k``.  Windows use closed index intervals ``z[a..b]`` in the public
API (both ends included).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, StructureError

DEFAULT_REL_TOL = 1e-8


@dataclass(frozen=True)
class SystemStructure:
    """Channel count ``m``, state dimension ``n`` and relative degrees ``d``."""

    m: int
    n: int
    d: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "d", tuple(int(v) for v in self.d))
        if self.m < 1 or self.n < 1:
            raise StructureError(f"m and n must be positive, got m={self.m}, n={self.n}")
        if len(self.d) != self.m:
            raise StructureError(f"need {self.m} relative degrees, got {len(self.d)}")
        if any(v < 1 for v in self.d):
            raise StructureError(f"relative degrees must be positive: {self.d}")
        if sum(self.d) != self.n:
            raise StructureError(f"sum of relative degrees {sum(self.d)} != n={self.n}")
        if self.m > self.n:
            raise StructureError(f"m={self.m} exceeds n={self.n}")

    @classmethod
    def from_degrees(cls, d: Sequence[int]) -> "SystemStructure":
        return cls(m=len(d), n=int(sum(d)), d=tuple(d))

    @property
    def offsets(self) -> tuple[int, ...]:
        """Start index of each channel's block inside a state vector."""
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.d)[:-1]]))


@dataclass(frozen=True)
class Trajectory:
    """Recorded inputs ``u_0..u_{N-1}`` and outputs ``y_{i,0..N+d_i-1}``."""

    inputs: np.ndarray
    outputs: tuple[np.ndarray, ...]
    structure: SystemStructure
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        u = np.array(self.inputs, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        outs = tuple(np.array(y, dtype=float).ravel() for y in self.outputs)
        s = self.structure
        if u.ndim != 2 or u.shape[0] < 1 or u.shape[1] != s.m:
            raise DimensionError(f"inputs must have shape (N>=1, {s.m}), got {u.shape}")
        if len(outs) != s.m:
            raise DimensionError(f"expected {s.m} output channels, got {len(outs)}")
        N = u.shape[0]
        for i, (y, di) in enumerate(zip(outs, s.d)):
            if y.size != N + di:
                raise DimensionError(
                    f"output channel {i + 1} has {y.size} samples, expected N+d={N + di}")
        if not np.all(np.isfinite(u)) or not all(np.all(np.isfinite(y)) for y in outs):
            raise DimensionError("trajectory contains non-finite samples")
        u.setflags(write=False)
        for y in outs:
            y.setflags(write=False)
        object.__setattr__(self, "inputs", u)
        object.__setattr__(self, "outputs", outs)

    @property
    def N(self) -> int:
        return self.inputs.shape[0]


def as_sequence(z) -> np.ndarray:
    """Coerce ``z`` to a float array of shape ``(N, eta)``."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2:
        raise DimensionError(f"sequence must be 1-D or 2-D, got shape {z.shape}")
    return z


def window(z, a: int, b: int) -> np.ndarray:
    """Stacked window ``z_[a,b]`` (closed interval) as a flat vector."""
    z = as_sequence(z)
    if not 0 <= a <= b < z.shape[0]:
        raise DimensionError(f"window [{a},{b}] outside sequence of length {z.shape[0]}")
    return z[a:b + 1].ravel()


def hankel(z, L: int) -> np.ndarray:
    """Depth-``L`` block Hankel matrix of shape ``(eta*L, N-L+1)``.

    Column ``j`` is the stacked window ``z_[j, j+L-1]``.
    """
    z = as_sequence(z)
    N, eta = z.shape
    if not 1 <= L <= N:
        raise DimensionError(f"Hankel depth L={L} out of range for sequence length N={N}")
    cols = N - L + 1
    view = np.lib.stride_tricks.sliding_window_view(z, L, axis=0)  # (cols, eta, L)
    return np.ascontiguousarray(view.transpose(2, 1, 0).reshape(L * eta, cols))


def state_sequence(outputs: Sequence[np.ndarray], d: Sequence[int], count: int) -> np.ndarray:
    """Shifted-output states ``Xi_0..Xi_{count-1}`` as an array ``(count, n)``.

    ``Xi_k`` concatenates ``y_i[k..k+d_i-1]`` over channels in order.
    """
    blocks = []
    for i, (y, di) in enumerate(zip(outputs, d)):
        y = np.asarray(y, dtype=float).ravel()
        if y.size < count + di - 1:
            raise DimensionError(
                f"output channel {i + 1} too short: {y.size} samples for {count} states (d={di})")
        blocks.append(np.lib.stride_tricks.sliding_window_view(y, di)[:count])
    return np.concatenate(blocks, axis=1)


def build_state_sequence(traj: Trajectory) -> np.ndarray:
    """States ``Xi_0..Xi_N`` of a trajectory, shape ``(N+1, n)``."""
    return state_sequence(traj.outputs, traj.structure.d, traj.N + 1)


def numeric_rank(M: np.ndarray, rel_tol: float = DEFAULT_REL_TOL) -> tuple[int, np.ndarray]:
    """Rank counting singular values above ``rel_tol * sigma_max``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0, np.zeros(0)
    sv = np.linalg.svd(M, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0, sv
    return int(np.sum(sv > rel_tol * sv[0])), sv


@dataclass(frozen=True)
class PEResult:
    is_pe: bool
    rank: int
    required_rank: int
    singular_values: np.ndarray
    reason: str = ""


def is_persistently_exciting(z, L: int, rel_tol: float = DEFAULT_REL_TOL) -> PEResult:
    """Check whether ``z`` is persistently exciting of order ``L``.

    The sequence is PE when its depth-``L`` Hankel matrix has numeric rank
    ``eta*L``.
    """
    z = as_sequence(z)
    N, eta = z.shape
    if N == 0 or eta == 0:
        raise DimensionError("cannot test persistency of excitation of an empty sequence")
    need = eta * L
    if L < 1 or L > N or need > N - L + 1:
        return PEResult(False, 0, need, np.zeros(0), "insufficient columns")
    rank, sv = numeric_rank(hankel(z, L), rel_tol)
    ok = rank == need
    return PEResult(ok, rank, need, sv, "" if ok else "rank deficient")


# -- CSV ---------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_trajectory_csv(path, traj: Trajectory) -> None:
    """Write ``k,u_1..u_m,y_1..y_m``; rows past a channel's length are empty."""
    m, N = traj.structure.m, traj.N
    rows = N + max(traj.structure.d)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k"] + [f"u_{j + 1}" for j in range(m)] + [f"y_{i + 1}" for i in range(m)])
        for k in range(rows):
            row = [str(k)]
            row += [_fmt(v) for v in traj.inputs[k]] if k < N else [""] * m
            row += [_fmt(y[k]) if k < y.size else "" for y in traj.outputs]
            w.writerow(row)


def read_trajectory_csv(path, d: Sequence[int] | None = None) -> Trajectory:
    """Read a trajectory CSV.

    Relative degrees default to the number of trailing output rows past the
    last input row, per channel.
    """
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        body = [row for row in r if row]
    m = (len(header) - 1) // 2
    expected = ["k"] + [f"u_{j + 1}" for j in range(m)] + [f"y_{i + 1}" for i in range(m)]
    if header != expected:
        raise DimensionError(f"bad trajectory header {header}, expected {expected}")
    u = [[float(c) for c in row[1:1 + m]] for row in body if row[1] != ""]
    ys = [[float(row[1 + m + i]) for row in body if row[1 + m + i] != ""] for i in range(m)]
    N = len(u)
    if d is None:
        d = [len(y) - N for y in ys]
    return Trajectory(np.array(u).reshape(N, m), tuple(np.array(y) for y in ys),
                      SystemStructure.from_degrees(d))


def write_sequence_csv(path, z, prefix: str = "u") -> None:
    """Plain ``k,<prefix>_1..`` CSV for input sequences such as ``ubar`` or ``uhat``."""
    z = as_sequence(z)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k"] + [f"{prefix}_{j + 1}" for j in range(z.shape[1])])
        for k, row in enumerate(z):
            w.writerow([str(k)] + [_fmt(v) for v in row])


def read_sequence_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(c) for c in row[1:]] for row in r if row]
    return np.array(rows, dtype=float).reshape(len(rows), len(header) - 1)
