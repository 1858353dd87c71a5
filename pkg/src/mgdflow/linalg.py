"""Sparse solvers and solver instrumentation.

Matrices are scipy CSR throughout.  The iterative path is a restarted,
left-preconditioned GMRES with modified Gram-Schmidt (one
reorthogonalization pass when orthogonality degrades) and an ILU(0)
preconditioner restricted to the matrix sparsity pattern.  Direct solves
are backed by SuperLU; the SPD factorization runs SuperLU in symmetric
mode without off-diagonal pivoting so that a nonpositive pivot reliably
flags a non-SPD matrix.

Every iterative solve returns a SolverReport; a failed solve reports the
best iterate instead of raising, which is what the breakdown/timing
studies consume.
"""

import time
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.sparse.linalg import splu


class DimensionMismatch(Exception):
    pass


class ZeroPivot(Exception):
    def __init__(self, row):
        self.row = row
        super().__init__(f"zero pivot in row {row}")


class NotPositiveDefinite(Exception):
    def __init__(self, pivot):
        self.pivot = pivot
        super().__init__(f"nonpositive pivot at index {pivot}")


class SingularMatrix(Exception):
    def __init__(self, row):
        self.row = row
        super().__init__(f"matrix is singular (row {row})")


class BreakdownError(Exception):
    pass


@dataclass
class SolverReport:
    converged: bool
    iterations: int
    final_relative_residual: float
    wall_time: float
    breakdown_reason: str = ""


def spmv(a, x):
    """y = A x with an explicit dimension check."""
    x = np.asarray(x)
    if a.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"matrix is {a.shape}, vector has length {x.shape[0]}")
    return a @ x


# ---------------------------------------------------------------------------
# ILU(0)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _ilu0_factor(indptr, indices, data, diag_pos):
    n = indptr.shape[0] - 1
    for i in range(n):
        start, end = indptr[i], indptr[i + 1]
        for kk in range(start, end):
            k = indices[kk]
            if k >= i:
                break
            pivot = data[diag_pos[k]]
            if pivot == 0.0:
                return k
            lik = data[kk] / pivot
            data[kk] = lik
            # subtract lik * (row k upper part) on the pattern of row i
            for jj in range(diag_pos[k] + 1, indptr[k + 1]):
                j = indices[jj]
                # binary search for column j in row i
                lo, hi = kk + 1, end
                while lo < hi:
                    mid = (lo + hi) // 2
                    if indices[mid] < j:
                        lo = mid + 1
                    else:
                        hi = mid
                if lo < end and indices[lo] == j:
                    data[lo] -= lik * data[jj]
        if data[diag_pos[i]] == 0.0:
            return i
    return -1


@njit(cache=True)
def _ilu0_solve(indptr, indices, data, diag_pos, b, x):
    n = indptr.shape[0] - 1
    # forward: L (unit diagonal) y = b
    for i in range(n):
        s = b[i]
        for kk in range(indptr[i], diag_pos[i]):
            s -= data[kk] * x[indices[kk]]
        x[i] = s
    # backward: U x = y
    for i in range(n - 1, -1, -1):
        s = x[i]
        for kk in range(diag_pos[i] + 1, indptr[i + 1]):
            s -= data[kk] * x[indices[kk]]
        x[i] = s / data[diag_pos[i]]


class Ilu0Preconditioner:
    """Zero-fill incomplete LU on the matrix's own sparsity pattern."""

    def __init__(self, a):
        a = a.tocsr().copy()
        a.sort_indices()
        n = a.shape[0]
        diag_pos = np.empty(n, dtype=np.int64)
        for i in range(n):
            row = a.indices[a.indptr[i] : a.indptr[i + 1]]
            pos = np.searchsorted(row, i)
            if pos >= len(row) or row[pos] != i:
                raise ZeroPivot(i)
            diag_pos[i] = a.indptr[i] + pos
        bad = _ilu0_factor(a.indptr, a.indices, a.data, diag_pos)
        if bad >= 0:
            raise ZeroPivot(int(bad))
        self._indptr = a.indptr
        self._indices = a.indices
        self._data = a.data
        self._diag_pos = diag_pos
        self.shape = a.shape

    def solve(self, b):
        x = np.empty_like(b)
        _ilu0_solve(self._indptr, self._indices, self._data, self._diag_pos, b, x)
        return x


class JacobiPreconditioner:
    """Diagonal preconditioner; zero diagonal entries fall back to 1."""

    def __init__(self, a):
        d = np.asarray(a.diagonal()).copy()
        d[d == 0.0] = 1.0
        self._inv = 1.0 / d
        self.shape = a.shape

    def solve(self, b):
        return self._inv * b


def ilu0(a):
    """ILU(0) preconditioner; raises ZeroPivot when a pivot vanishes."""
    return Ilu0Preconditioner(a)


def make_preconditioner(a):
    """ILU(0) with a recorded Jacobi fallback on zero pivots.

    Returns (preconditioner, note); note is "" normally and names the
    fallback when ILU(0) broke down.
    """
    try:
        return ilu0(a), ""
    except ZeroPivot as e:
        return JacobiPreconditioner(a), f"ilu0 zero pivot at row {e.row}; jacobi fallback"


# ---------------------------------------------------------------------------
# GMRES
# ---------------------------------------------------------------------------


def gmres(a, b, x0=None, restart=200, tol=1e-8, max_iters=2000, preconditioner=None):
    """Restarted GMRES with left preconditioning.

    Convergence is monitored in the preconditioned norm and certified by an
    unpreconditioned residual check ||b - A x|| <= tol * ||b||; a run that
    passes the inner estimate but fails the true check keeps iterating.
    On failure the best iterate found is returned with converged False and
    the reason recorded (budget exhaustion, stagnation, or non-finite
    arithmetic).
    """
    t0 = time.perf_counter()
    n = a.shape[0]
    if a.shape[1] != n or b.shape[0] != n:
        raise DimensionMismatch("gmres needs a square system")
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolverReport(True, 0, 0.0, time.perf_counter() - t0)

    def precond(v):
        return preconditioner.solve(v) if preconditioner is not None else v

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    pb_norm = np.linalg.norm(precond(b))
    if not np.isfinite(pb_norm) or pb_norm == 0.0:
        pb_norm = bnorm

    total = 0
    best_x = x.copy()
    best_res = np.linalg.norm(b - a @ x) / bnorm
    reason = ""

    while total < max_iters:
        r = precond(b - a @ x)
        beta = np.linalg.norm(r)
        if not np.isfinite(beta):
            reason = "nonfinite residual in Krylov recurrence"
            break
        if beta == 0.0:
            true_res = np.linalg.norm(b - a @ x) / bnorm
            if true_res <= tol:
                return x, SolverReport(True, total, float(true_res), time.perf_counter() - t0)
            reason = "stagnation: zero preconditioned residual"
            break
        m = min(restart, max_iters - total)
        v = np.zeros((m + 1, n))
        h = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        v[0] = r / beta
        k_used = 0
        broke = False
        for k in range(m):
            w = precond(a @ v[k])
            norm_before = np.linalg.norm(w)
            for i in range(k + 1):
                h[i, k] = w @ v[i]
                w -= h[i, k] * v[i]
            # one reorthogonalization pass when cancellation ate the vector
            if np.linalg.norm(w) < 1e-3 * norm_before:
                for i in range(k + 1):
                    corr = w @ v[i]
                    h[i, k] += corr
                    w -= corr * v[i]
            h[k + 1, k] = np.linalg.norm(w)
            if not np.isfinite(h[: k + 2, k]).all():
                reason = "nonfinite entry in Krylov recurrence"
                broke = True
                k_used = k
                break
            lucky = h[k + 1, k] < 1e-14 * max(1.0, abs(h[k, k]))
            if not lucky:
                v[k + 1] = w / h[k + 1, k]
            # apply stored Givens rotations, then generate the new one
            for i in range(k):
                t = cs[i] * h[i, k] + sn[i] * h[i + 1, k]
                h[i + 1, k] = -sn[i] * h[i, k] + cs[i] * h[i + 1, k]
                h[i, k] = t
            denom = np.hypot(h[k, k], h[k + 1, k])
            if denom == 0.0:
                reason = "breakdown: zero Hessenberg column"
                broke = True
                k_used = k
                break
            cs[k], sn[k] = h[k, k] / denom, h[k + 1, k] / denom
            h[k, k] = denom
            h[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            total += 1
            k_used = k + 1
            if abs(g[k + 1]) <= tol * pb_norm or lucky or total >= max_iters:
                break
        if k_used > 0:
            y = np.zeros(k_used)
            for i in range(k_used - 1, -1, -1):
                y[i] = (g[i] - h[i, i + 1 : k_used] @ y[i + 1 : k_used]) / h[i, i]
            x = x + v[:k_used].T @ y
        true_res = np.linalg.norm(b - a @ x) / bnorm
        if np.isfinite(true_res) and true_res < best_res:
            best_res = true_res
            best_x = x.copy()
        if reason:
            break
        if true_res <= tol:
            return x, SolverReport(True, total, float(true_res), time.perf_counter() - t0)
        if k_used == 0:
            reason = "stagnation: no Krylov progress"
            break
    if not reason:
        reason = "iteration budget exhausted"
    return best_x, SolverReport(
        False, total, float(best_res), time.perf_counter() - t0, breakdown_reason=reason
    )


# ---------------------------------------------------------------------------
# direct factorizations (SuperLU-backed)
# ---------------------------------------------------------------------------


class SpdFactorization:
    """Direct factorization of a fixed SPD matrix, reusable for many solves."""

    def __init__(self, a):
        a = a.tocsc()
        sym_err = abs(a - a.T).max()
        scale = max(abs(a).max(), 1.0)
        if sym_err > 1e-10 * scale:
            raise NotPositiveDefinite(-1)
        try:
            self._lu = splu(
                a,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as e:
            raise NotPositiveDefinite(_pivot_from_message(e)) from e
        d = self._lu.U.diagonal()
        bad = np.flatnonzero(d <= 0.0)
        if bad.size:
            raise NotPositiveDefinite(int(bad[0]))
        self.shape = a.shape

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))


def spd_factorize(a):
    return SpdFactorization(a)


def spd_solve(f, b):
    return f.solve(b)


class LuFactorization:
    """Sparse LU with partial pivoting; the robust fallback and test oracle."""

    def __init__(self, a):
        try:
            self._lu = splu(a.tocsc())
        except RuntimeError as e:
            raise SingularMatrix(_pivot_from_message(e)) from e
        self.shape = a.shape

    def solve(self, b):
        x = self._lu.solve(np.asarray(b, dtype=float))
        if not np.isfinite(x).all():
            raise SingularMatrix(-1)
        return x


def direct_lu(a):
    return LuFactorization(a)


def _pivot_from_message(exc):
    # SuperLU reports "Factor is exactly singular" or similar; the column is
    # not always recoverable, so -1 means unknown.
    msg = str(exc)
    for tok in msg.replace(",", " ").split():
        if tok.isdigit():
            return int(tok)
    return -1


def export_coo(matrix, path):
    """Shared coordinate-format text dump (row, col, value; 17 digits)."""
    from .fem import export_coo as _impl

    _impl(matrix, path)
