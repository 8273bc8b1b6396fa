"""Dense two-phase simplex for standard-form linear programs.

Solves ``min c^T x  s.t.  A x = b, x >= 0`` with Bland's anti-cycling rule.
Infeasible systems come back with an explicit certificate ``y`` satisfying
``y^T A >= 0`` and ``y^T b < 0``; unbounded problems return an improving
ray.  Problem sizes here are small (hundreds of columns), so the plain
tableau implementation is the right tool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["StandardLp", "LpResult", "LpError", "lp_solve"]


class LpError(Exception):
    """Numerical failure inside the simplex (reported, never silent)."""


@dataclass
class StandardLp:
    """min c^T x subject to A x = b, x >= 0; c = None means feasibility only."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError("A and b have inconsistent row counts")
        if self.c is not None:
            self.c = np.asarray(self.c, dtype=float).ravel()
            if self.c.shape[0] != self.A.shape[1]:
                raise ValueError("c and A have inconsistent column counts")


@dataclass
class LpResult:
    status: str  # 'optimal' | 'infeasible' | 'unbounded'
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    objective: float | None = None
    certificate: np.ndarray | None = None
    ray: np.ndarray | None = None
    iterations: int = 0


def _pivot(T, rhs, row0, obj, r, j):
    piv = T[r, j]
    T[r] /= piv
    rhs[r] /= piv
    col = T[:, j].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])
    rhs -= col * rhs[r]
    obj -= row0[j] * rhs[r]
    row0 -= row0[j] * T[r]
    return obj


def _iterate(T, rhs, row0, obj, basis, allowed, tol, max_iter):
    """Bland-rule simplex iterations on the current tableau.

    Returns (obj, status, entering) where status is 'optimal' or 'unbounded'.
    """
    it = 0
    while True:
        entering = -1
        for j in allowed:
            if row0[j] < -tol:
                entering = j
                break
        if entering < 0:
            return obj, "optimal", -1, it
        # ratio test; Bland tie-break on the smallest basic variable index
        leaving = -1
        best = np.inf
        for i in range(T.shape[0]):
            a = T[i, entering]
            if a > tol:
                ratio = rhs[i] / a
                if ratio < best - tol or (ratio < best + tol and
                                          (leaving < 0 or basis[i] < basis[leaving])):
                    best = min(best, ratio)
                    leaving = i
        if leaving < 0:
            return obj, "unbounded", entering, it
        obj = _pivot(T, rhs, row0, obj, leaving, entering)
        basis[leaving] = entering
        it += 1
        if it > max_iter:
            raise LpError(f"simplex exceeded {max_iter} iterations")


def lp_solve(lp: StandardLp, tol: float = 1e-8, max_iter: int | None = None) -> LpResult:
    """Two-phase dense simplex with Bland's rule.

    The returned duals refer to the original row order and signs; on
    infeasibility, ``certificate`` satisfies ``certificate @ A >= -tol`` and
    ``certificate @ b < 0``.
    """
    A0 = lp.A
    b0 = lp.b
    d, p = A0.shape
    if max_iter is None:
        max_iter = 1000 + 200 * (p + d)
    if d == 0:
        if lp.c is not None and np.any(lp.c < -tol):
            j = int(np.argmin(lp.c))
            ray = np.zeros(p)
            ray[j] = 1.0
            return LpResult(status="unbounded", ray=ray)
        x = np.zeros(p)
        obj = 0.0 if lp.c is None else 0.0
        return LpResult(status="optimal", x=x, y=np.zeros(0), objective=obj)

    signs = np.where(b0 < 0.0, -1.0, 1.0)
    A = A0 * signs[:, None]
    b = b0 * signs

    # phase 1: minimize the sum of artificials starting from the identity basis
    T = np.hstack([A, np.eye(d)])
    rhs = b.copy()
    basis = [p + i for i in range(d)]
    row0 = np.concatenate([-A.sum(axis=0), np.zeros(d)])
    obj = -float(b.sum())  # row0/obj store cost minus c_B^T (tableau) parts
    allowed = range(p + d)
    obj, status, _, it1 = _iterate(T, rhs, row0, obj, basis, allowed, tol, max_iter)
    phase1_value = -obj  # = c_B^T rhs for the phase-1 cost

    if phase1_value > 1e-7:
        # dual of the phase-1 optimum certifies infeasibility
        y = 1.0 - row0[p:]
        cert = -(signs * y)
        if not (cert @ b0 < 0):
            raise LpError("phase-1 certificate failed validation")
        return LpResult(status="infeasible", certificate=cert, iterations=it1)

    # drive any remaining artificial variables out of the basis
    keep = np.ones(d, dtype=bool)
    for i in range(d):
        if basis[i] >= p:
            piv_col = -1
            for j in range(p):
                if abs(T[i, j]) > tol:
                    piv_col = j
                    break
            if piv_col < 0:
                keep[i] = False  # redundant row
            else:
                obj = _pivot(T, rhs, row0, obj, i, piv_col)
                basis[i] = piv_col
    if not keep.all():
        rows = np.nonzero(keep)[0]
        T = T[rows]
        rhs = rhs[rows]
        basis = [basis[i] for i in rows]

    if lp.c is None:
        x = np.zeros(p)
        for i, bi in enumerate(basis):
            x[bi] = rhs[i]
        return LpResult(status="optimal", x=x, y=np.zeros(d), objective=0.0,
                        iterations=it1)

    # phase 2 on the real costs; artificial columns stay in the tableau to
    # expose the basis inverse but may not re-enter
    c_full = np.concatenate([lp.c, np.zeros(d)])
    cb = np.array([c_full[bi] for bi in basis])
    row0 = c_full - cb @ T
    obj = -float(cb @ rhs)
    obj, status, entering, it2 = _iterate(T, rhs, row0, obj, basis, range(p),
                                          tol, max_iter)
    if status == "unbounded":
        ray = np.zeros(p)
        ray[entering] = 1.0
        for i, bi in enumerate(basis):
            if bi < p:
                ray[bi] = -T[i, entering]
        ray[np.abs(ray) < tol] = 0.0
        return LpResult(status="unbounded", ray=ray, iterations=it1 + it2)

    x = np.zeros(p)
    for i, bi in enumerate(basis):
        x[bi] = rhs[i]
    y_flip_rows = -row0[p:]
    y = np.zeros(d)
    kept = np.nonzero(keep)[0] if not keep.all() else np.arange(d)
    y[kept] = signs[kept] * y_flip_rows[kept]
    return LpResult(status="optimal", x=x, y=y, objective=float(lp.c @ x),
                    iterations=it1 + it2)
