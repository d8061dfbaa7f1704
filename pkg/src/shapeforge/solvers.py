"""Sparse linear solvers: direct LU, Jacobi/ILU(0) smoothers, BiCGStab with
restart-on-breakdown, inter-grid transfer operators and a geometric
multigrid V-cycle used as preconditioner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    pass


class BreakdownError(SolverError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class DivergenceError(SolverError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    history: list


def lu_solve(matrix, rhs):
    """Direct solve; sparse input goes through SuperLU, dense through LAPACK.
    A 0x0 system returns an empty solution."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] == 0:
        return np.zeros(0)
    if sp.issparse(matrix):
        return spla.splu(matrix.tocsc()).solve(rhs)
    return np.linalg.solve(np.asarray(matrix, dtype=float), rhs)


class LUFactorization:
    """Reusable sparse LU; solves with the matrix or its transpose."""

    def __init__(self, matrix):
        self._lu = spla.splu(matrix.tocsc())

    def solve(self, rhs, transpose=False):
        return self._lu.solve(np.asarray(rhs, dtype=float),
                              trans="T" if transpose else "N")


# ---------------------------------------------------------------------------
# smoothers
# ---------------------------------------------------------------------------

class JacobiSmoother:
    """Damped Jacobi relaxation."""

    def __init__(self, matrix, omega=0.66):
        self.matrix = matrix.tocsr()
        self.omega = omega
        d = self.matrix.diagonal()
        if np.any(d == 0.0):
            raise SolverError("Jacobi smoother needs a nonzero diagonal")
        self.inv_diag = 1.0 / d

    def smooth(self, x, b, sweeps):
        for _ in range(sweeps):
            x = x + self.omega * self.inv_diag * (b - self.matrix @ x)
        return x


def ilu0_factor(matrix):
    """ILU(0): incomplete LU restricted to the sparsity pattern of A.

    Returns (L, U) in CSR with L unit lower triangular. Rows are processed
    in order (IKJ form); fill outside the pattern is dropped.
    """
    a = matrix.tocsr().sorted_indices()
    n = a.shape[0]
    indptr, indices = a.indptr, a.indices
    data = a.data.astype(float).copy()
    diag_pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        row = indices[indptr[i]:indptr[i + 1]]
        hit = np.searchsorted(row, i)
        if hit >= len(row) or row[hit] != i:
            raise SolverError(f"ILU(0) needs structural diagonal (row {i})")
        diag_pos[i] = indptr[i] + hit

    col_of = [dict(zip(indices[indptr[k]:indptr[k + 1]].tolist(),
                       range(indptr[k], indptr[k + 1]))) for k in range(n)]
    for i in range(n):
        start, stop = indptr[i], indptr[i + 1]
        for pos in range(start, stop):
            k = indices[pos]
            if k >= i:
                break
            ukk = data[diag_pos[k]]
            if ukk == 0.0:
                raise SolverError(f"ILU(0) zero pivot at row {k}")
            lik = data[pos] / ukk
            data[pos] = lik
            krow = col_of[k]
            for pos2 in range(pos + 1, stop):
                j = indices[pos2]
                hit = krow.get(j)
                if hit is not None and j > k:
                    data[pos2] -= lik * data[hit]

    is_strict_lower = indices < np.repeat(np.arange(n), np.diff(indptr))
    lower = sp.csr_matrix(
        (np.where(is_strict_lower, data, 0.0), indices.copy(), indptr.copy()),
        shape=a.shape,
    )
    lower.eliminate_zeros()
    lower = (lower + sp.eye(n, format="csr")).tocsr()
    upper = sp.csr_matrix(
        (np.where(is_strict_lower, 0.0, data), indices.copy(), indptr.copy()),
        shape=a.shape,
    )
    upper.eliminate_zeros()
    return lower, upper.tocsr()


class ILU0Smoother:
    """One application solves L U e = r on the original pattern."""

    def __init__(self, matrix):
        self.matrix = matrix.tocsr()
        self.lower, self.upper = ilu0_factor(matrix)

    def apply(self, r):
        y = spla.spsolve_triangular(self.lower, r, lower=True, unit_diagonal=True)
        return spla.spsolve_triangular(self.upper, y, lower=False)

    def smooth(self, x, b, sweeps):
        for _ in range(sweeps):
            x = x + self.apply(b - self.matrix @ x)
        return x


def make_smoother(matrix, kind, omega=0.66):
    if kind == "jacobi":
        return JacobiSmoother(matrix, omega)
    if kind == "ilu0":
        return ILU0Smoother(matrix)
    raise ValueError(f"unknown smoother {kind!r}")


# ---------------------------------------------------------------------------
# BiCGStab
# ---------------------------------------------------------------------------

def bicgstab(matrix, b, preconditioner=None, x0=None, rel_tol=1e-3,
             abs_tol=1e-12, max_iter=500):
    """Preconditioned BiCGStab on ||b - Ax|| <= max(rel_tol ||b||, abs_tol).

    preconditioner is a callable r -> z (or None). A rho/omega breakdown
    restarts the recurrence once from the current residual; a second
    breakdown raises BreakdownError. Divergence or running out of iterations
    raises DivergenceError with the residual history attached.
    """
    a = matrix
    m = preconditioner or (lambda r: r)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - a @ x
    target = max(rel_tol * float(np.linalg.norm(b)), abs_tol)
    history = [float(np.linalg.norm(r))]
    if history[-1] <= target:
        return SolveResult(x, 0, history)

    tiny = np.finfo(float).eps ** 2
    restarted = False

    def restart_or_fail(what):
        nonlocal restarted, r_hat, p, v, rho, alpha, omega
        if restarted:
            raise BreakdownError(f"BiCGStab {what} breakdown after restart", history)
        restarted = True
        r_hat = r.copy()
        p = np.zeros_like(b)
        v = np.zeros_like(b)
        rho = alpha = omega = 1.0

    r_hat = r.copy()
    p = np.zeros_like(b)
    v = np.zeros_like(b)
    rho = alpha = omega = 1.0

    for it in range(1, max_iter + 1):
        rho_new = float(r_hat @ r)
        if abs(rho_new) < tiny * max(1.0, history[0] ** 2):
            restart_or_fail("rho")
            rho_new = float(r_hat @ r)
        beta = (rho_new / rho) * (alpha / omega)
        rho = rho_new
        p = r + beta * (p - omega * v)
        p_hat = m(p)
        v = a @ p_hat
        denom = float(r_hat @ v)
        if abs(denom) < tiny * max(1.0, history[0] ** 2):
            restart_or_fail("alpha")
            continue
        alpha = rho / denom
        s = r - alpha * v
        if float(np.linalg.norm(s)) <= target:
            x = x + alpha * p_hat
            history.append(float(np.linalg.norm(b - a @ x)))
            return SolveResult(x, it, history)
        s_hat = m(s)
        t = a @ s_hat
        tt = float(t @ t)
        if tt < tiny:
            restart_or_fail("omega")
            continue
        omega = float(t @ s) / tt
        x = x + alpha * p_hat + omega * s_hat
        r = s - omega * t
        res = float(np.linalg.norm(r))
        history.append(res)
        if not np.isfinite(res) or res > 1e8 * max(history[0], 1.0):
            raise DivergenceError("BiCGStab diverged", history)
        if res <= target:
            return SolveResult(x, it, history)

    raise DivergenceError(f"BiCGStab did not converge in {max_iter} iterations",
                          history)


# ---------------------------------------------------------------------------
# grid transfers
# ---------------------------------------------------------------------------

def p1_prolongation(hierarchy, fine_level):
    """Coarse-to-fine interpolation of P1 nodal values: retained vertices are
    injected, edge midpoints average their parent edge's endpoints."""
    pv = hierarchy.parent_vertex[fine_level]
    pe = hierarchy.parent_edge[fine_level]
    coarse = hierarchy.levels[fine_level - 1]
    nf, nc = len(pv), coarse.num_vertices
    rows, cols, vals = [], [], []
    keep = np.flatnonzero(pv >= 0)
    rows.append(keep)
    cols.append(pv[keep])
    vals.append(np.ones(keep.size))
    mids = np.flatnonzero(pe >= 0)
    ends = coarse.edges[pe[mids]]
    for k in range(2):
        rows.append(mids)
        cols.append(ends[:, k])
        vals.append(np.full(mids.size, 0.5))
    p = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nf, nc),
    )
    return p.tocsr()


def p2_prolongation(hierarchy, fine_level):
    """P2 transfer by embedded P1 interpolation: coarse P2 nodes coincide
    with fine vertices (injection); fine edge nodes average their edge's
    endpoint values."""
    pv = hierarchy.parent_vertex[fine_level]
    pe = hierarchy.parent_edge[fine_level]
    fine = hierarchy.levels[fine_level]
    coarse = hierarchy.levels[fine_level - 1]
    nvc = coarse.num_vertices
    node_of_fine_vertex = np.where(pv >= 0, pv, nvc + pe)
    nf = fine.num_vertices + fine.num_edges
    nc = nvc + coarse.num_edges
    rows = [np.arange(fine.num_vertices)]
    cols = [node_of_fine_vertex]
    vals = [np.ones(fine.num_vertices)]
    erow = fine.num_vertices + np.arange(fine.num_edges)
    for k in range(2):
        rows.append(erow)
        cols.append(node_of_fine_vertex[fine.edges[:, k]])
        vals.append(np.full(fine.num_edges, 0.5))
    p = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nf, nc),
    )
    return p.tocsr()


def vector_prolongation(scalar_p):
    """Expand a scalar nodal transfer to node-major interleaved vectors."""
    return sp.kron(scalar_p, sp.eye(2), format="csr")


def mixed_prolongation(hierarchy, fine_level):
    """Taylor-Hood transfer: P2 velocity block then P1 pressure block."""
    pv2 = vector_prolongation(p2_prolongation(hierarchy, fine_level))
    pp = p1_prolongation(hierarchy, fine_level)
    return sp.block_diag([pv2, pp], format="csr")


def restrict_transfer(p, fine_free, coarse_free):
    """Transfer between the free (unconstrained) dofs of both levels."""
    return p.tocsr()[fine_free][:, coarse_free]


# ---------------------------------------------------------------------------
# V-cycle
# ---------------------------------------------------------------------------

@dataclass
class MultigridConfig:
    pre_smooth: int = 3
    post_smooth: int = 3
    smoother: str = "jacobi"
    omega: float = 0.66


class VCycle:
    """Geometric multigrid V-cycle over re-assembled level matrices.

    matrices[0] is the coarsest operator (solved directly), transfers[k]
    interpolates level k to level k+1. Usable directly as a preconditioner
    callable r -> z.
    """

    def __init__(self, matrices, transfers, config=None):
        if len(matrices) != len(transfers) + 1:
            raise ValueError("need one transfer per level pair")
        self.config = config or MultigridConfig()
        self.matrices = [m.tocsr() for m in matrices]
        self.transfers = [p.tocsr() for p in transfers]
        self.smoothers = [
            make_smoother(m, self.config.smoother, self.config.omega)
            for m in self.matrices[1:]
        ]
        self.coarse = LUFactorization(self.matrices[0])

    @property
    def num_levels(self):
        return len(self.matrices)

    def cycle(self, level, x, b):
        if level == 0:
            return self.coarse.solve(b)
        a = self.matrices[level]
        sm = self.smoothers[level - 1]
        p = self.transfers[level - 1]
        x = sm.smooth(x, b, self.config.pre_smooth)
        coarse_b = p.T @ (b - a @ x)
        coarse_x = self.cycle(level - 1, np.zeros_like(coarse_b), coarse_b)
        x = x + p @ coarse_x
        return sm.smooth(x, b, self.config.post_smooth)

    def solve(self, b, x0=None, cycles=1):
        x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
        for _ in range(cycles):
            x = self.cycle(self.num_levels - 1, x, b)
        return x

    def __call__(self, r):
        return self.cycle(self.num_levels - 1, np.zeros_like(r), r)
