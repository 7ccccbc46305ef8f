"""Independent reference implementations used only by the tests.

None of these import from the package's numerical code paths; they rebuild
each quantity from first principles (exact rationals, symbolic mechanics,
plain loops, KKT systems).
"""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache

import numpy as np
import sympy as sp


# -- exact rank -----------------------------------------------------------------

def rational_rank(rows) -> int:
    """Rank by Gaussian elimination over the rationals."""
    M = [[Fraction(v) for v in row] for row in rows]
    if not M:
        return 0
    n_rows, n_cols = len(M), len(M[0])
    rank, col = 0, 0
    while rank < n_rows and col < n_cols:
        piv = next((i for i in range(rank, n_rows) if M[i][col] != 0), None)
        if piv is None:
            col += 1
            continue
        M[rank], M[piv] = M[piv], M[rank]
        for i in range(n_rows):
            if i != rank and M[i][col] != 0:
                f = M[i][col] / M[rank][col]
                M[i] = [a - f * b for a, b in zip(M[i], M[rank])]
        rank += 1
        col += 1
    return rank


def hankel_by_windows(z, L):
    """Columns are the stacked windows ``z[j..j+L-1]``."""
    z = [list(np.atleast_1d(v)) for v in z]
    N = len(z)
    cols = []
    for j in range(N - L + 1):
        col = []
        for i in range(L):
            col.extend(z[j + i])
        cols.append(col)
    return np.array(cols, dtype=object).T if cols else np.zeros((0, 0))


def pe_oracle(z, L) -> bool:
    """Exact PE decision for integer sequences."""
    z = [list(np.atleast_1d(v)) for v in z]
    eta, N = len(z[0]), len(z)
    if eta * L > N - L + 1:
        return False
    H = hankel_by_windows(z, L)
    return rational_rank(H.tolist()) == eta * L


def states_by_index(outputs, d, count):
    """``Xi_k`` built entry by entry."""
    out = []
    for k in range(count):
        row = []
        for y, di in zip(outputs, d):
            for j in range(di):
                row.append(y[k + j])
        out.append(row)
    return np.array(out, dtype=float)


# -- symbolic manipulator -------------------------------------------------------------

@lru_cache(maxsize=None)
def _lagrangian_model(hanging: bool):
    t1, t2, w1, w2 = sp.symbols("t1 t2 w1 w2", real=True)
    m1, m2, l1, l2, g = sp.symbols("m1 m2 l1 l2 g", positive=True)
    t = sp.Symbol("t")
    q1, q2 = sp.Function("q1")(t), sp.Function("q2")(t)
    # point masses at link ends; angles from the upward vertical, q2 relative
    x1, y1 = l1 * sp.sin(q1), l1 * sp.cos(q1)
    x2, y2 = x1 + l2 * sp.sin(q1 + q2), y1 + l2 * sp.cos(q1 + q2)
    T = sp.Rational(1, 2) * m1 * (sp.diff(x1, t) ** 2 + sp.diff(y1, t) ** 2) \
        + sp.Rational(1, 2) * m2 * (sp.diff(x2, t) ** 2 + sp.diff(y2, t) ** 2)
    sign = -1 if hanging else 1
    V = sign * g * (m1 * y1 + m2 * y2)
    Lag = T - V
    qs = [q1, q2]
    eqs = []
    for q in qs:
        eqs.append(sp.diff(sp.diff(Lag, sp.diff(q, t)), t) - sp.diff(Lag, q))
    a1, a2 = sp.symbols("a1 a2")
    subs = {sp.diff(q1, t, 2): a1, sp.diff(q2, t, 2): a2}
    eqs = [sp.expand(e.subs(subs)) for e in eqs]
    subs2 = {sp.diff(q1, t): w1, sp.diff(q2, t): w2}
    eqs = [e.subs(subs2).subs({q1: t1, q2: t2}) for e in eqs]
    M = sp.Matrix([[sp.diff(e, a) for a in (a1, a2)] for e in eqs])
    rest = sp.Matrix([e.subs({a1: 0, a2: 0}) for e in eqs])
    G = rest.subs({w1: 0, w2: 0})
    Cw = sp.simplify(rest - G)
    args = (t1, t2, w1, w2, m1, m2, l1, l2, g)
    return (sp.lambdify(args, sp.simplify(M), "numpy"), sp.lambdify(args, Cw, "numpy"),
            sp.lambdify(args, sp.simplify(G), "numpy"))


def lagrangian_terms(theta, dtheta, p):
    """``(M, C(q, w) w, G)`` from the Euler-Lagrange equations."""
    fM, fC, fG = _lagrangian_model(bool(p.hanging))
    args = (theta[0], theta[1], dtheta[0], dtheta[1], p.m1, p.m2, p.l1, p.l2, p.g)
    return (np.array(fM(*args), dtype=float), np.array(fC(*args), dtype=float).ravel(),
            np.array(fG(*args), dtype=float).ravel())


def euler_step_oracle(x, tau, p):
    M, Cw, G = lagrangian_terms(x[[0, 2]], x[[1, 3]], p)
    z = np.linalg.solve(M, np.asarray(tau, float) - Cw - G)
    return x + p.Ts * np.array([x[1], z[0], x[3], z[1]])


# -- least squares ----------------------------------------------------------------

def kkt_solution(A, y, E, f, w):
    """Minimizer of ``|A a - y|^2 + w |a|^2`` subject to ``E a = f``."""
    p = A.shape[1]
    K = np.block([[2 * (A.T @ A + w * np.eye(p)), E.T], [E, np.zeros((E.shape[0], E.shape[0]))]])
    rhs = np.concatenate([2 * A.T @ y, f])
    return np.linalg.solve(K, rhs)[:p]


# -- loop residuals -----------------------------------------------------------------

def simulation_residual_loop(psi_fn, u, xi, ubar, alpha, L):
    """Residual of the simulation problem assembled sample by sample.

    ``u`` has N rows, ``xi`` N+1 rows, ``psi_fn(u_k, xi_k) -> r-vector``.
    """
    N = u.shape[0]
    cols = N - L + 1
    out = []
    for k in range(L):
        lhs = sum(alpha[j] * psi_fn(u[k + j], xi[k + j]) for j in range(cols))
        xi_hat = sum(alpha[j] * xi[k + j] for j in range(cols))
        out.append(lhs - psi_fn(ubar[k], xi_hat))
    return np.concatenate(out)


def matching_residual_loop(psi_fn, u, xi, xi_bar, alpha, L):
    N = u.shape[0]
    cols = N - L + 1
    top, bottom = [], []
    for k in range(L):
        lhs = sum(alpha[j] * psi_fn(u[k + j], xi[k + j]) for j in range(cols))
        u_hat = sum(alpha[j] * u[k + j] for j in range(cols))
        top.append(lhs - psi_fn(u_hat, xi_bar[k]))
    for k in range(L + 1):
        bottom.append(sum(alpha[j] * xi[k + j] for j in range(cols)) - xi_bar[k])
    return np.concatenate(top + bottom)


def shift_chain_step(xi, v, d):
    """Decoupled delay chains: each block shifts up and takes ``v_i`` last."""
    out, off = [], 0
    for i, di in enumerate(d):
        block = list(xi[off:off + di])
        out.extend(block[1:] + [v[i]])
        off += di
    return np.array(out, dtype=float)
