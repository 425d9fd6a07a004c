"""Bilinear finite element assembly for the four benchmark PDEs.

All systems live on the interior DOFs of a :class:`~rsdsolve.grid_tree.Grid`;
homogeneous Dirichlet nodes are dropped from both rows and columns.
"""
from __future__ import annotations

import enum
from typing import Optional

import numpy as np
import scipy.io
import scipy.sparse as sp

from .grid_tree import ConfigurationError, Grid

__all__ = [
    "PdeKind",
    "LAME_LAMBDA",
    "LAME_MU",
    "element_matrix",
    "stiffness_matrix",
    "mass_matrix",
    "element_dofs",
    "assemble",
    "manufactured_problem",
    "export_matrix_market",
]

LAME_LAMBDA = 10.0
LAME_MU = 1.0

# 2-point Gauss-Legendre rule on [-1, 1]
_GAUSS_PTS = np.array([-1.0, 1.0]) / np.sqrt(3.0)
_GAUSS_WTS = np.array([1.0, 1.0])

# local node order: counter-clockwise from the lower-left corner
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])
_NODE_OFFSETS = ((0, 0), (1, 0), (1, 1), (0, 1))


class PdeKind(enum.Enum):
    POISSON = "poisson"
    WEAK_COUPLED = "weak"
    STRONG_COUPLED = "strong"
    NAVIER_LAME = "lame"

    @property
    def components(self) -> int:
        return 1 if self is PdeKind.POISSON else 2

    @classmethod
    def parse(cls, value) -> "PdeKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {
            "poisson": cls.POISSON,
            "weak": cls.WEAK_COUPLED, "weakcoupled": cls.WEAK_COUPLED,
            "strong": cls.STRONG_COUPLED, "strongcoupled": cls.STRONG_COUPLED,
            "lame": cls.NAVIER_LAME, "navierlame": cls.NAVIER_LAME,
        }
        try:
            return aliases[key.replace("_", "").replace("-", "")]
        except KeyError:
            raise ConfigurationError(f"unknown PDE kind {value!r}") from None

    def coefficients(self, literal_eq4_sign: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(D, C)`` defining the bilinear form.

        ``D[a, b, p, q]`` weighs ``d/dx_p (test, comp a) * d/dx_q (trial, comp b)``
        and ``C[a, b]`` weighs ``test_a * trial_b`` (reaction/coupling).
        """
        c = self.components
        D = np.zeros((c, c, 2, 2))
        C = np.zeros((c, c))
        if self is PdeKind.POISSON:
            D[0, 0] = np.eye(2)
        elif self in (PdeKind.WEAK_COUPLED, PdeKind.STRONG_COUPLED):
            coupling = 0.01 if self is PdeKind.WEAK_COUPLED else 100.0
            D[0, 0] = np.diag([0.01, 1.0])
            D[1, 1] = np.diag([1.0, 0.01])
            C[0, 1] = coupling
            C[1, 0] = -coupling
        else:
            lam, mu = LAME_LAMBDA, LAME_MU
            grad_div = -(lam + mu) if literal_eq4_sign else (lam + mu)
            for a in range(2):
                D[a, a] += mu * np.eye(2)
                for b in range(2):
                    D[a, b, a, b] += grad_div
        return D, C


def _shape_gradients(hx: float, hy: float):
    """Shape values and physical gradients at the 2x2 Gauss points.

    Returns ``(N, dN, w)`` with ``N[g, i]``, ``dN[g, p, i]`` and the
    quadrature weights ``w[g]`` including the Jacobian.
    """
    vals, grads, wts = [], [], []
    for gx, wx in zip(_GAUSS_PTS, _GAUSS_WTS):
        for gy, wy in zip(_GAUSS_PTS, _GAUSS_WTS):
            vals.append(0.25 * (1 + _XI * gx) * (1 + _ETA * gy))
            dxi = 0.25 * _XI * (1 + _ETA * gy)
            deta = 0.25 * _ETA * (1 + _XI * gx)
            grads.append([dxi * 2.0 / hx, deta * 2.0 / hy])
            wts.append(wx * wy * hx * hy / 4.0)
    return np.array(vals), np.array(grads), np.array(wts)


def stiffness_matrix(hx: float = 1.0, hy: float = 1.0, ax: float = 1.0, ay: float = 1.0) -> np.ndarray:
    """Scalar anisotropic stiffness ``ax*(u_x, w_x) + ay*(u_y, w_y)`` on one element."""
    D = np.zeros((1, 1, 2, 2))
    D[0, 0] = np.diag([ax, ay])
    return _element_from_coefficients(D, np.zeros((1, 1)), hx, hy)


def mass_matrix(hx: float = 1.0, hy: float = 1.0) -> np.ndarray:
    return _element_from_coefficients(np.zeros((1, 1, 2, 2)), np.ones((1, 1)), hx, hy)


def _element_from_coefficients(D: np.ndarray, C: np.ndarray, hx: float, hy: float) -> np.ndarray:
    if not (hx > 0 and hy > 0):
        raise ConfigurationError(f"element sizes must be positive, got hx={hx}, hy={hy}")
    N, dN, w = _shape_gradients(hx, hy)
    grad = np.einsum("g,gpi,gqj->pqij", w, dN, dN)
    mass = np.einsum("g,gi,gj->ij", w, N, N)
    c = C.shape[0]
    # interleaved: local index = node * c + component
    Ke = np.einsum("abpq,pqij->iajb", D, grad) + np.einsum("ab,ij->iajb", C, mass)
    return Ke.reshape(4 * c, 4 * c)


def element_matrix(kind: PdeKind, hx: float = 1.0, hy: float = 1.0,
                   literal_eq4_sign: bool = False) -> np.ndarray:
    """Element matrix of size ``4c x 4c`` with components interleaved per node."""
    kind = PdeKind.parse(kind)
    D, C = kind.coefficients(literal_eq4_sign)
    return _element_from_coefficients(D, C, hx, hy)


def element_dofs(grid: Grid, columns: Optional[range] = None) -> np.ndarray:
    """Global DOF index (or -1) for every local DOF of every element.

    Elements are indexed by their lower-left node; ``columns`` restricts the
    element columns considered. Shape is ``(n_elements, 4c)``.
    """
    if columns is None:
        columns = range(grid.nx - 1)
    ex = np.asarray(columns, dtype=np.int64)
    ey = np.arange(grid.ny - 1)
    EX, EY = np.meshgrid(ex, ey, indexing="ij")
    EX, EY = EX.ravel(), EY.ravel()
    per_node = [grid.dof_map[EX + ox, EY + oy] for ox, oy in _NODE_OFFSETS]
    return np.stack(per_node, axis=1).reshape(len(EX), 4 * grid.components)


def assemble(grid: Grid, kind: PdeKind, literal_eq4_sign: bool = False,
             columns: Optional[range] = None) -> sp.csr_matrix:
    """Assemble the interior-DOF system matrix.

    With ``columns`` set, only elements in those element columns contribute;
    this is how per-side interface contributions are obtained.
    """
    kind = PdeKind.parse(kind)
    if kind.components != grid.components:
        raise ConfigurationError(
            f"{kind.value} needs {kind.components} components, grid has {grid.components}")
    Ke = element_matrix(kind, grid.hx, grid.hy, literal_eq4_sign)
    edofs = element_dofs(grid, columns)
    n_loc = Ke.shape[0]
    rows = np.repeat(edofs, n_loc, axis=1).ravel()
    cols = np.tile(edofs, (1, n_loc)).ravel()
    vals = np.broadcast_to(Ke.ravel(), (edofs.shape[0], n_loc * n_loc)).ravel()
    keep = (rows >= 0) & (cols >= 0) & (vals != 0.0)
    n = grid.n_dofs
    K = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
    K.sum_duplicates()
    K.eliminate_zeros()
    K.sort_indices()
    return K


def manufactured_problem(K: sp.spmatrix, seed: int = 0, zero: bool = False):
    """Random exact solution in ``[-1, 1]`` and its right-hand side ``f = K u*``.

    ``zero=True`` forces ``u* = 0`` (degenerate-input hook).
    """
    n = K.shape[0]
    if zero:
        u_star = np.zeros(n)
    else:
        u_star = np.random.default_rng(seed).uniform(-1.0, 1.0, n)
    return u_star, K @ u_star


def export_matrix_market(K: sp.spmatrix, path, comment: str = "") -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(K), comment=comment, field="real",
                     symmetry="general")
