"""Dense two-phase simplex for small equality-constrained linear programs.

Solves ``min c @ x  s.t.  A @ x = b, x >= 0``.  Bland's rule guarantees
termination on degenerate problems and makes the pivot sequence (hence the
returned vertex) deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverFailure


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    status: str  # "optimal" | "infeasible" | "unbounded"
    duals: np.ndarray | None
    basis: list[int]
    iterations: int

    @property
    def success(self) -> bool:
        return self.status == "optimal"


def _pivot(tab, row, col):
    tab[row] /= tab[row, col]
    piv = tab[row]
    for r in range(tab.shape[0]):
        if r != row and tab[r, col] != 0.0:
            tab[r] -= tab[r, col] * piv


def _run(tab, basis, n_cols, tol, max_iter, allowed):
    """Iterate on a tableau whose last row holds reduced costs (objective to minimize)."""
    it = 0
    m = tab.shape[0] - 1
    while True:
        cost = tab[-1, :n_cols]
        entering = next((j for j in range(n_cols) if allowed[j] and cost[j] < -tol), None)
        if entering is None:
            return "optimal", it
        colv = tab[:m, entering]
        ratios = np.full(m, np.inf)
        pos = colv > tol
        ratios[pos] = tab[:m, -1][pos] / colv[pos]
        if not np.any(pos):
            return "unbounded", it
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
        leaving = min(ties, key=lambda r: basis[r])
        _pivot(tab, leaving, entering)
        basis[leaving] = entering
        it += 1
        if it > max_iter:
            raise SolverFailure("simplex iteration budget exhausted")


def simplex(c, A_eq, b_eq, tol: float = 1e-11, max_iter: int = 50_000) -> LPResult:
    c = np.asarray(c, dtype=float)
    A = np.array(A_eq, dtype=float)
    b = np.array(b_eq, dtype=float)
    m, n = A.shape
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1
    scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))

    # phase 1: artificials n..n+m-1
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = A
    tab[:m, n:n + m] = np.eye(m)
    tab[:m, -1] = b
    tab[-1, :n] = -A.sum(axis=0)
    tab[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    allowed = np.ones(n + m, dtype=bool)
    status, it1 = _run(tab, basis, n + m, tol, max_iter, allowed)
    if -tab[-1, -1] > 1e-9 * scale * max(1, m):
        return LPResult(np.full(n, np.nan), np.nan, "infeasible", None, basis, it1)

    # drive remaining artificials out of the basis
    for r, bv in enumerate(basis):
        if bv >= n:
            cand = [j for j in range(n) if abs(tab[r, j]) > tol]
            if cand:
                _pivot(tab, r, cand[0])
                basis[r] = cand[0]
    keep = [r for r, bv in enumerate(basis) if bv < n]
    rows = keep + [m]
    tab = tab[rows][:, list(range(n)) + [n + m]]
    basis = [basis[r] for r in keep]

    # phase 2
    tab[-1, :] = 0.0
    tab[-1, :n] = c
    for r, bv in enumerate(basis):
        tab[-1] -= c[bv] * tab[r]
    allowed = np.ones(n, dtype=bool)
    status, it2 = _run(tab, basis, n, tol, max_iter, allowed)
    if status != "optimal":
        return LPResult(np.full(n, np.nan), -np.inf, status, None, basis, it1 + it2)
    x = np.zeros(n)
    for r, bv in enumerate(basis):
        x[bv] = tab[r, -1]
    x[np.abs(x) < tol * scale] = 0.0

    # duals of the original rows from the optimal basis: B^T y = c_B
    Bmat = np.array(A_eq, dtype=float)[:, basis]
    duals = None
    if Bmat.shape[0] == Bmat.shape[1]:
        try:
            duals = np.linalg.solve(Bmat.T, c[basis])
        except np.linalg.LinAlgError:
            duals = None
    if duals is None:
        duals = np.linalg.lstsq(Bmat.T, c[basis], rcond=None)[0]
    return LPResult(x, float(c @ x), "optimal", duals, basis, it1 + it2)
