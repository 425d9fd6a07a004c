"""Recursive Schur decomposition (RSD) preconditioner.

One application solves ``K u = f`` approximately on the full strip:

* recurse into both children to get ``v_L``, ``v_R``;
* form the interface right-hand side from the hat-leaf parts of ``v``;
* run ``gamma`` GMRES steps on the interface Schur system, where every
  S-MatVec replaces ``K_VV^{-1}`` by an exact solve on the hat leaf only;
* correct the hat-leaf parts of ``v`` with one more hat-leaf solve per side.

The hat leaf of a pseudo sub-domain is the true sub-domain inside it that
touches the parent's interface. All other leaf rows of ``K_LI``/``K_RI`` are
structurally zero, which is what makes the hat substitution cheap.

Point-to-point traffic between the two hat-leaf owners is not real (all
leaves live in one process) but is counted, as are leaf solves.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .fem_assembly import PdeKind
from .grid_tree import DomainTree, Grid, TreeNode
from .linalg_core import (
    BandedFactorization,
    SingularMatrixError,
    band_factor,
    band_solve,
    extract_block,
    gmres_fixed_steps,
    split_interface_matrix,
)

__all__ = [
    "RsdSetupError",
    "RsdCounters",
    "SchurNodeData",
    "RsdSetup",
    "RsdPreconditioner",
    "rsd_setup",
    "restrict_hat",
    "prolong_hat",
    "schur_matvec",
    "rsd_apply",
]

logger = logging.getLogger(__name__)

LEFT, RIGHT = "left", "right"


class RsdSetupError(RuntimeError):
    pass


@dataclass
class RsdCounters:
    leaf_solve_count: int = 0
    smatvec_count: int = 0
    point_to_point_message_count: int = 0
    leaf_solves_per_level: Counter = field(default_factory=Counter)
    leaf_solves_per_leaf: Counter = field(default_factory=Counter)
    messages_per_level: Counter = field(default_factory=Counter)

    def reset(self) -> None:
        self.leaf_solve_count = 0
        self.smatvec_count = 0
        self.point_to_point_message_count = 0
        self.leaf_solves_per_level.clear()
        self.leaf_solves_per_leaf.clear()
        self.messages_per_level.clear()

    def merge(self, other: "RsdCounters") -> None:
        self.leaf_solve_count += other.leaf_solve_count
        self.smatvec_count += other.smatvec_count
        self.point_to_point_message_count += other.point_to_point_message_count
        self.leaf_solves_per_level.update(other.leaf_solves_per_level)
        self.leaf_solves_per_leaf.update(other.leaf_solves_per_leaf)
        self.messages_per_level.update(other.messages_per_level)

    @property
    def max_leaf_solves_per_leaf(self) -> int:
        return max(self.leaf_solves_per_leaf.values(), default=0)

    def to_dict(self) -> dict:
        return {
            "leaf_solve_count": self.leaf_solve_count,
            "smatvec_count": self.smatvec_count,
            "point_to_point_message_count": self.point_to_point_message_count,
            "max_leaf_solves_per_leaf": self.max_leaf_solves_per_leaf,
            "leaf_solves_per_level": {str(k): v for k, v in sorted(self.leaf_solves_per_level.items())},
            "messages_per_level": {str(k): v for k, v in sorted(self.messages_per_level.items())},
        }


@dataclass(eq=False)
class SchurNodeData:
    """Blocks cached for one interior node.

    ``K_LhI`` maps the interface into the left hat leaf, ``K_ILh`` the other
    way round; likewise on the right. Position arrays locate the children's
    DOFs inside the node's DOF vector and the hat-leaf DOFs inside each
    child's vector.
    """

    node_id: int
    K_LhI: sp.csr_matrix
    K_ILh: sp.csr_matrix
    K_RhI: sp.csr_matrix
    K_IRh: sp.csr_matrix
    K_II_L: sp.csr_matrix
    K_II_R: sp.csr_matrix
    pos_VL: np.ndarray
    pos_VR: np.ndarray
    pos_I: np.ndarray
    hat_pos_left: np.ndarray
    hat_pos_right: np.ndarray

    @property
    def interface_size(self) -> int:
        return self.pos_I.shape[0]


@dataclass(eq=False)
class RsdSetup:
    """Everything a preconditioner application reads, plus its counters."""

    tree: DomainTree
    grid: Grid
    nodes: dict[int, SchurNodeData]
    leaf_factors: dict[int, BandedFactorization]
    gamma: int = 2
    inner_tol: Optional[float] = None
    counters: RsdCounters = field(default_factory=RsdCounters)

    def inner_steps(self, node: TreeNode) -> int:
        # exact-inner hook: enough steps to span the whole interface space
        if self.inner_tol is not None:
            return max(self.gamma, self.nodes[node.id].interface_size)
        return self.gamma

    def leaf_solve(self, leaf_id: int, b: np.ndarray, level: int) -> np.ndarray:
        try:
            factor = self.leaf_factors[leaf_id]
        except KeyError:
            raise RsdSetupError(f"leaf {leaf_id} has no factorization") from None
        self.counters.leaf_solve_count += 1
        self.counters.leaf_solves_per_level[level] += 1
        self.counters.leaf_solves_per_leaf[leaf_id] += 1
        return band_solve(factor, b)

    def message(self, level: int) -> None:
        self.counters.point_to_point_message_count += 1
        self.counters.messages_per_level[level] += 1


def _positions(sub: np.ndarray, full: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(full, sub)
    if sub.size and (pos.max() >= full.size or np.any(full[pos] != sub)):
        raise ValueError("index set is not contained in its parent set")
    return pos


def rsd_setup(K: sp.csr_matrix, tree: DomainTree, grid: Grid,
              kind: PdeKind = PdeKind.POISSON, gamma: int = 2,
              literal_eq4_sign: bool = False, inner_tol: Optional[float] = None) -> RsdSetup:
    """Extract every per-node block and factorize every leaf block."""
    K = sp.csr_matrix(K)
    if K.shape != (grid.n_dofs, grid.n_dofs):
        raise ValueError(f"matrix shape {K.shape} does not match grid with {grid.n_dofs} DOFs")
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    leaf_factors: dict[int, BandedFactorization] = {}
    for leaf in tree.leaves:
        try:
            leaf_factors[leaf.id] = band_factor(extract_block(K, leaf.dofs, leaf.dofs))
        except SingularMatrixError as exc:
            raise RsdSetupError(f"leaf {leaf.id} (rank {leaf.owner_rank}) is singular: {exc}") from exc

    nodes: dict[int, SchurNodeData] = {}
    for node in tree.interior_nodes:
        I = node.idx_I
        hl = tree[node.hat_left_leaf]
        hr = tree[node.hat_right_leaf]
        K_II_L, K_II_R = split_interface_matrix(K, node, grid, kind, literal_eq4_sign)
        nodes[node.id] = SchurNodeData(
            node_id=node.id,
            K_LhI=extract_block(K, hl.dofs, I),
            K_ILh=extract_block(K, I, hl.dofs),
            K_RhI=extract_block(K, hr.dofs, I),
            K_IRh=extract_block(K, I, hr.dofs),
            K_II_L=K_II_L,
            K_II_R=K_II_R,
            pos_VL=_positions(node.idx_VL, node.dofs),
            pos_VR=_positions(node.idx_VR, node.dofs),
            pos_I=_positions(I, node.dofs),
            hat_pos_left=_positions(hl.dofs, node.idx_VL),
            hat_pos_right=_positions(hr.dofs, node.idx_VR),
        )
    logger.debug("rsd setup: %d leaves factorized, %d interfaces", len(leaf_factors), len(nodes))
    return RsdSetup(tree=tree, grid=grid, nodes=nodes, leaf_factors=leaf_factors,
                    gamma=int(gamma), inner_tol=inner_tol)


def _hat_positions(node: TreeNode, side: str, store: RsdSetup) -> np.ndarray:
    if node.is_leaf:
        raise ValueError(f"node {node.id} is a leaf; hat sub-domains exist only for interior nodes")
    data = store.nodes[node.id]
    if side == LEFT:
        return data.hat_pos_left
    if side == RIGHT:
        return data.hat_pos_right
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def restrict_hat(node: TreeNode, side: str, w: np.ndarray, store: RsdSetup) -> np.ndarray:
    """Entries of a vector on ``V_side`` that belong to the hat leaf."""
    pos = _hat_positions(node, side, store)
    expected = (node.idx_VL if side == LEFT else node.idx_VR).shape[0]
    if w.shape[0] != expected:
        raise ValueError(f"vector has length {w.shape[0]}, expected {expected}")
    return w[pos]


def prolong_hat(node: TreeNode, side: str, v: np.ndarray, store: RsdSetup) -> np.ndarray:
    """Embed a hat-leaf vector into ``V_side``, zero elsewhere."""
    pos = _hat_positions(node, side, store)
    if v.shape[0] != pos.shape[0]:
        raise ValueError(f"vector has length {v.shape[0]}, expected {pos.shape[0]}")
    n = (node.idx_VL if side == LEFT else node.idx_VR).shape[0]
    out = np.zeros(n)
    out[pos] = v
    return out


def schur_matvec(node: TreeNode, store: RsdSetup, x: np.ndarray) -> np.ndarray:
    """Approximate interface Schur product ``y = S x`` using hat-leaf solves."""
    if node.is_leaf:
        raise ValueError(f"node {node.id} is a leaf")
    d = store.nodes[node.id]
    if x.shape[0] != d.interface_size:
        raise ValueError(f"interface vector has length {x.shape[0]}, expected {d.interface_size}")
    store.counters.smatvec_count += 1
    store.message(node.level)  # x: L-hat -> R-hat
    i_L = d.K_II_L @ x
    i_R = d.K_II_R @ x
    v_L = d.K_LhI @ x
    v_R = d.K_RhI @ x
    w_L = store.leaf_solve(node.hat_left_leaf, v_L, node.level)
    w_R = store.leaf_solve(node.hat_right_leaf, v_R, node.level)
    y_L = i_L - d.K_ILh @ w_L
    y_R = i_R - d.K_IRh @ w_R
    store.message(node.level)  # y_R: R-hat -> L-hat
    return y_L + y_R


def rsd_apply(node: TreeNode, store: RsdSetup, f: np.ndarray, h: Optional[int] = None) -> np.ndarray:
    """Approximately solve ``K_VV u = f`` on the sub-domain of ``node``."""
    if h is None:
        h = node.height_below
    if h != node.height_below:
        raise ValueError(f"height {h} does not match node {node.id} (height {node.height_below})")
    f = np.asarray(f, dtype=float)
    if f.shape[0] != node.dofs.shape[0]:
        raise ValueError(f"right-hand side has length {f.shape[0]}, expected {node.dofs.shape[0]}")
    if h == 0:
        return store.leaf_solve(node.id, f, node.level)

    d = store.nodes[node.id]
    v_L = rsd_apply(node.left, store, f[d.pos_VL], h - 1)
    v_R = rsd_apply(node.right, store, f[d.pos_VR], h - 1)

    g_L = d.K_ILh @ restrict_hat(node, LEFT, v_L, store)
    g_R = d.K_IRh @ restrict_hat(node, RIGHT, v_R, store)
    store.message(node.level)  # g_R: R-hat -> L-hat
    g = f[d.pos_I] - g_L - g_R

    u_I = gmres_fixed_steps(lambda x: schur_matvec(node, store, x), g,
                            store.inner_steps(node), tol=store.inner_tol)
    store.message(node.level)  # u_I: L-hat -> R-hat

    z_L = store.leaf_solve(node.hat_left_leaf, d.K_LhI @ u_I, node.level)
    z_R = store.leaf_solve(node.hat_right_leaf, d.K_RhI @ u_I, node.level)
    v_L[d.hat_pos_left] -= z_L
    v_R[d.hat_pos_right] -= z_R

    u = np.empty_like(f)
    u[d.pos_VL] = v_L
    u[d.pos_VR] = v_R
    u[d.pos_I] = u_I
    return u


class RsdPreconditioner:
    """Callable ``f -> u`` applying RSD at the root of the tree.

    ``counters`` describes the most recent application; ``totals``
    accumulates over all applications.
    """

    def __init__(self, store: RsdSetup):
        self.store = store
        self.totals = RsdCounters()
        self.applications = 0

    @classmethod
    def build(cls, K, tree, grid, kind=PdeKind.POISSON, gamma=2, literal_eq4_sign=False,
              inner_tol=None) -> "RsdPreconditioner":
        return cls(rsd_setup(K, tree, grid, kind, gamma, literal_eq4_sign, inner_tol))

    @property
    def counters(self) -> RsdCounters:
        return self.store.counters

    def __call__(self, f: np.ndarray) -> np.ndarray:
        self.store.counters.reset()
        u = rsd_apply(self.store.tree.root, self.store, f)
        self.totals.merge(self.store.counters)
        self.applications += 1
        return u
