"""Sparse kernels, banded leaf factorization and GMRES drivers.

Matrices are plain :class:`scipy.sparse.csr_matrix` objects with sorted
column indices; index sets are sorted integer arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack

from .fem_assembly import PdeKind, assemble
from .grid_tree import Grid, TreeNode

__all__ = [
    "CsrMatrix",
    "SingularMatrixError",
    "BandedFactorization",
    "KrylovStats",
    "spmv",
    "extract_block",
    "split_interface_matrix",
    "bandwidths",
    "band_factor",
    "band_solve",
    "gmres_flexible",
    "gmres_fixed_steps",
]

CsrMatrix = sp.csr_matrix
Operator = Callable[[np.ndarray], np.ndarray]

REORTH_THRESHOLD = 1e-8


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def spmv(K: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != K.shape[1]:
        raise ValueError(f"dimension mismatch: matrix is {K.shape}, vector has shape {x.shape}")
    return K @ x


def extract_block(K: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
    """Submatrix ``K[rows][:, cols]`` renumbered by position in the index sets."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    n_r, n_c = K.shape
    for name, idx, lim in (("row", rows, n_r), ("column", cols, n_c)):
        if idx.size and (idx.min() < 0 or idx.max() >= lim):
            raise IndexError(f"{name} index out of range [0, {lim})")
    B = K[rows][:, cols]
    B = sp.csr_matrix(B)
    B.sort_indices()
    return B


def split_interface_matrix(K: sp.csr_matrix, node: TreeNode, grid: Grid,
                           kind: PdeKind = PdeKind.POISSON,
                           literal_eq4_sign: bool = False):
    """Left and right element contributions to the interface block of ``node``.

    Only the element columns touching the interface contribute to ``K_II``,
    so each side is assembled from that single element column.
    """
    if node.is_leaf:
        raise ValueError(f"node {node.id} is a leaf and has no interface")
    col = node.interface_col
    I = node.idx_I
    K_left = assemble(grid, kind, literal_eq4_sign, columns=range(col - 1, col))
    K_right = assemble(grid, kind, literal_eq4_sign, columns=range(col, col + 1))
    return extract_block(K_left, I, I), extract_block(K_right, I, I)


def bandwidths(A: sp.spmatrix) -> tuple[int, int]:
    """Lower and upper bandwidth of ``A``."""
    A = sp.coo_matrix(A)
    if A.nnz == 0:
        return 0, 0
    d = A.col.astype(np.int64) - A.row.astype(np.int64)
    return int(max(0, -d.min())), int(max(0, d.max()))


@dataclass(frozen=True)
class BandedFactorization:
    """LU factors with partial pivoting in LAPACK band storage (``?gbtrf``)."""

    lu: np.ndarray = field(repr=False)
    piv: np.ndarray = field(repr=False)
    n: int
    kl: int
    ku: int

    def solve(self, b: np.ndarray) -> np.ndarray:
        return band_solve(self, b)


def band_factor(A: sp.spmatrix) -> BandedFactorization:
    A = sp.coo_matrix(A)
    n, m = A.shape
    if n != m:
        raise ValueError(f"banded factorization needs a square matrix, got {A.shape}")
    kl, ku = bandwidths(A)
    # gbtrf needs kl extra rows on top for fill-in from pivoting
    ab = np.zeros((2 * kl + ku + 1, n))
    np.add.at(ab, (kl + ku + A.row - A.col, A.col), A.data)
    lu, piv, info = lapack.dgbtrf(ab, kl, ku)
    if info > 0:
        raise SingularMatrixError(f"exactly zero pivot at position {info - 1}")
    if info < 0:
        raise ValueError(f"dgbtrf: illegal argument {-info}")
    lu.setflags(write=False)
    piv.setflags(write=False)
    return BandedFactorization(lu=lu, piv=piv, n=n, kl=kl, ku=ku)


def band_solve(F: BandedFactorization, b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.shape[0] != F.n:
        raise ValueError(f"right-hand side has length {b.shape[0]}, expected {F.n}")
    x, info = lapack.dgbtrs(F.lu, F.kl, F.ku, b, F.piv)
    if info != 0:
        raise ValueError(f"dgbtrs failed with info={info}")
    return x


@dataclass
class KrylovStats:
    iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    reason: str = "max-iterations"
    applications: int = 0

    @property
    def converged(self) -> bool:
        return self.reason == "converged"


class _Arnoldi:
    """Arnoldi process with Givens-updated least-squares residual.

    The basis is kept in a growing 2D array so the orthogonality check is a
    single matrix-vector product.
    """

    def __init__(self, r0: np.ndarray, capacity: int):
        self.beta = float(np.linalg.norm(r0))
        n = r0.shape[0]
        self.V = np.empty((min(capacity, 64) + 1, n))
        self.V[0] = r0 / self.beta
        self.H = np.zeros((capacity + 1, capacity))
        self.cs = np.zeros(capacity)
        self.sn = np.zeros(capacity)
        self.g = np.zeros(capacity + 1)
        self.g[0] = self.beta
        self.k = 0

    def _ensure(self, rows: int):
        if rows > self.V.shape[0]:
            grown = np.empty((max(rows, 2 * self.V.shape[0]), self.V.shape[1]))
            grown[: self.V.shape[0]] = self.V
            self.V = grown

    def add(self, w: np.ndarray) -> tuple[float, bool]:
        """Orthogonalize ``A v_k`` into the basis; return (residual, breakdown)."""
        k = self.k
        V = self.V
        h = self.H[:, k]
        w = np.array(w, dtype=float)
        w_norm0 = np.linalg.norm(w)
        for j in range(k + 1):
            hj = V[j] @ w
            h[j] = hj
            w -= hj * V[j]
        h_next = np.linalg.norm(w)
        if h_next > 0.0:
            loss = np.max(np.abs(V[: k + 1] @ w)) / h_next
            if loss > REORTH_THRESHOLD:
                for j in range(k + 1):
                    hj = V[j] @ w
                    h[j] += hj
                    w -= hj * V[j]
                h_next = np.linalg.norm(w)
        h[k + 1] = h_next
        breakdown = h_next <= 4.0 * np.finfo(float).eps * max(w_norm0, 1e-300)
        if not breakdown:
            self._ensure(k + 2)
            self.V[k + 1] = w / h_next

        for j in range(k):
            t = self.cs[j] * h[j] + self.sn[j] * h[j + 1]
            h[j + 1] = -self.sn[j] * h[j] + self.cs[j] * h[j + 1]
            h[j] = t
        denom = math.hypot(h[k], h[k + 1])
        if denom == 0.0:
            self.cs[k], self.sn[k] = 1.0, 0.0
        else:
            self.cs[k], self.sn[k] = h[k] / denom, h[k + 1] / denom
        h[k] = denom
        h[k + 1] = 0.0
        self.g[k + 1] = -self.sn[k] * self.g[k]
        self.g[k] = self.cs[k] * self.g[k]
        self.k = k + 1
        return abs(self.g[k + 1]), breakdown

    def coefficients(self) -> np.ndarray:
        k = self.k
        R = self.H[:k, :k]
        y = np.zeros(k)
        for i in range(k - 1, -1, -1):
            if R[i, i] == 0.0:
                y[i] = 0.0
                continue
            y[i] = (self.g[i] - R[i, i + 1:k] @ y[i + 1:k]) / R[i, i]
        return y


def gmres_flexible(apply_A: Operator, apply_M: Optional[Operator], b: np.ndarray,
                   tol: float = 1e-12, max_it: int = 2000, restart: Optional[int] = None):
    """Right-preconditioned flexible GMRES from a zero initial guess.

    The preconditioned directions are stored, so ``apply_M`` may change from
    one iteration to the next. By default there is no restart (``restart``
    caps the Krylov dimension per cycle otherwise). Convergence is declared
    only once the true residual satisfies ``||b - A x|| <= tol * ||b||``.

    Returns
    -------
    x : ndarray
    stats : KrylovStats
        ``residual_history`` holds the least-squares residual norms, starting
        with ``||b||``.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if apply_M is None:
        apply_M = lambda v: v  # noqa: E731
    if restart is not None and restart < 1:
        raise ValueError(f"restart must be >= 1, got {restart}")
    stats = KrylovStats()
    bnorm = float(np.linalg.norm(b))
    stats.residual_history.append(bnorm)
    if bnorm == 0.0:
        stats.reason = "converged"
        return np.zeros(n), stats

    x = np.zeros(n)
    r = b
    it = 0
    while it < max_it:
        cycle = max_it - it if restart is None else min(restart, max_it - it)
        arnoldi = _Arnoldi(r, cycle)
        Z: list[np.ndarray] = []
        stop = None
        for j in range(cycle):
            z = np.asarray(apply_M(arnoldi.V[j]), dtype=float)
            Z.append(z)
            res, breakdown = arnoldi.add(apply_A(z))
            stats.applications += 1
            it += 1
            stats.iterations = it
            stats.residual_history.append(res)
            if res <= tol * bnorm or breakdown:
                stop = "breakdown" if breakdown else "check"
                break
        y = arnoldi.coefficients()
        for yi, zi in zip(y, Z):
            x += yi * zi
        r = b - apply_A(x)
        true_res = float(np.linalg.norm(r))
        if true_res <= tol * bnorm:
            stats.reason = "converged"
            return x, stats
        if stop == "breakdown":
            stats.reason = "breakdown"
            return x, stats
        if stop == "check" and restart is None:
            # estimate and true residual disagree; continue in a fresh cycle
            continue
    stats.reason = "max-iterations"
    return x, stats


def gmres_fixed_steps(apply_S: Operator, g: np.ndarray, gamma: int,
                      tol: Optional[float] = None, return_stats: bool = False):
    """Unpreconditioned GMRES with exactly ``gamma`` operator applications.

    Starts from zero and returns the residual minimizer over the Krylov space
    of dimension ``gamma``. Stops early only on breakdown, or when ``tol`` is
    given and the relative residual drops below it.
    """
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    g = np.asarray(g, dtype=float)
    stats = KrylovStats()
    gnorm = float(np.linalg.norm(g))
    stats.residual_history.append(gnorm)
    if gnorm == 0.0:
        stats.reason = "converged"
        x = np.zeros_like(g)
        return (x, stats) if return_stats else x

    arnoldi = _Arnoldi(g, gamma)
    stats.reason = "max-iterations"
    for it in range(gamma):
        w = apply_S(arnoldi.V[it])
        stats.applications += 1
        res, breakdown = arnoldi.add(w)
        stats.iterations = it + 1
        stats.residual_history.append(res)
        if breakdown:
            stats.reason = "breakdown"
            break
        if tol is not None and res <= tol * gnorm:
            stats.reason = "converged"
            break
    y = arnoldi.coefficients()
    x = y @ arnoldi.V[: arnoldi.k]
    return (x, stats) if return_stats else x
