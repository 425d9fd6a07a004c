"""Regular grid over a long, thin strip and its binary-tree substructuring.

The strip is ``P`` true sub-domains wide and one sub-domain tall. Every true
sub-domain carries ``N`` nodes per dimension, neighbours share one column of
nodes, and every boundary node is Dirichlet-eliminated.

Each true sub-domain is a unit square unless explicit element sizes are
given, so the default spacing is ``1 / (N - 1)`` in both directions.

Interior degrees of freedom are numbered column by column (x outer, y inner)
with the ``c`` field components interleaved per node, so the DOF set of any
tree node is a contiguous range and every leaf block is banded with
half-bandwidth ``N * c - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

__all__ = [
    "ConfigurationError",
    "Grid",
    "TreeNode",
    "DomainTree",
    "build_tree",
    "build_grid",
    "compute_index_sets",
    "is_power_of_two",
]


class ConfigurationError(ValueError):
    """Raised for invalid problem parameters (P, N, gamma, mesh spacing...)."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True, eq=False)
class Grid:
    """Global node grid with Dirichlet mask and interior DOF numbering.

    ``dof_map[ix, iy, comp]`` is the interior DOF index of that node component,
    or ``-1`` when the node lies on the boundary and has been eliminated.
    """

    P: int
    N: int
    components: int = 1
    hx: Optional[float] = None
    hy: Optional[float] = None
    dirichlet_mask: np.ndarray = field(init=False, repr=False)
    dof_map: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.hx is None:
            object.__setattr__(self, "hx", 1.0 / (self.N - 1))
        if self.hy is None:
            object.__setattr__(self, "hy", 1.0 / (self.N - 1))
        nx, ny, c = self.nx, self.ny, self.components
        mask = np.zeros((nx, ny), dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        dof_map = np.full((nx, ny, c), -1, dtype=np.int64)
        n_int_y = ny - 2
        ix = np.arange(1, nx - 1)[:, None, None]
        iy = np.arange(1, ny - 1)[None, :, None]
        comp = np.arange(c)[None, None, :]
        dof_map[1:-1, 1:-1, :] = ((ix - 1) * n_int_y + (iy - 1)) * c + comp
        mask.setflags(write=False)
        dof_map.setflags(write=False)
        object.__setattr__(self, "dirichlet_mask", mask)
        object.__setattr__(self, "dof_map", dof_map)

    @property
    def nx(self) -> int:
        return self.P * (self.N - 1) + 1

    @property
    def ny(self) -> int:
        return self.N

    @property
    def n_dofs(self) -> int:
        return (self.nx - 2) * (self.ny - 2) * self.components

    @property
    def dofs_per_column(self) -> int:
        return (self.ny - 2) * self.components

    def column_dofs(self, first: int, last: int) -> np.ndarray:
        """Interior DOFs on node columns ``first..last`` inclusive, sorted."""
        first = max(first, 1)
        last = min(last, self.nx - 2)
        if last < first:
            return np.empty(0, dtype=np.int64)
        m = self.dofs_per_column
        return np.arange((first - 1) * m, last * m, dtype=np.int64)


@dataclass(eq=False)
class TreeNode:
    """One node of the decomposition tree.

    Interior nodes own an interface column; ``idx_VL``, ``idx_VR`` and
    ``idx_I`` partition ``dofs``. Leaves are true sub-domains and only
    carry ``dofs``.
    """

    id: int
    level: int
    height_below: int
    leaf_range: tuple[int, int]
    children: Optional[tuple["TreeNode", "TreeNode"]] = None
    parent: Optional["TreeNode"] = field(default=None, repr=False)
    x_range: Optional[tuple[int, int]] = None
    interface_col: Optional[int] = None
    dofs: Optional[np.ndarray] = field(default=None, repr=False)
    idx_VL: Optional[np.ndarray] = field(default=None, repr=False)
    idx_VR: Optional[np.ndarray] = field(default=None, repr=False)
    idx_I: Optional[np.ndarray] = field(default=None, repr=False)
    hat_left_leaf: Optional[int] = None
    hat_right_leaf: Optional[int] = None
    owner_rank: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    @property
    def left(self) -> "TreeNode":
        return self.children[0]

    @property
    def right(self) -> "TreeNode":
        return self.children[1]


@dataclass(eq=False)
class DomainTree:
    root: TreeNode
    nodes: list[TreeNode]
    P: int

    @property
    def height(self) -> int:
        return self.root.height_below

    @property
    def leaves(self) -> list[TreeNode]:
        """Leaves ordered left to right (equivalently, by owner rank)."""
        return sorted((n for n in self.nodes if n.is_leaf), key=lambda n: n.owner_rank)

    @property
    def interior_nodes(self) -> list[TreeNode]:
        return [n for n in self.nodes if not n.is_leaf]

    def __getitem__(self, node_id: int) -> TreeNode:
        return self.nodes[node_id]

    def __iter__(self) -> Iterator[TreeNode]:
        return iter(self.nodes)

    def leaf_of_rank(self, rank: int) -> TreeNode:
        return self.leaves[rank]


def build_tree(P: int) -> DomainTree:
    """Complete binary tree over ``P`` true sub-domains.

    Node ids are assigned breadth first, so for ``P = 4`` the ids 0..6 are
    the root, the two pseudo sub-domains and the four leaves, left to right.
    Leaf ``k`` (counting from the left) is owned by rank ``k``; every
    interface is owned by the leaf immediately to its left.
    """
    if not isinstance(P, (int, np.integer)) or P < 2 or not is_power_of_two(int(P)):
        raise ConfigurationError(f"P must be a power of two >= 2, got {P!r}")
    P = int(P)
    height = P.bit_length() - 1

    nodes: list[TreeNode] = []
    root = TreeNode(id=0, level=0, height_below=height, leaf_range=(0, P))
    nodes.append(root)
    frontier = [root]
    while frontier:
        nxt = []
        for node in frontier:
            lo, hi = node.leaf_range
            if hi - lo == 1:
                node.owner_rank = lo
                continue
            mid = (lo + hi) // 2
            kids = []
            for rng in ((lo, mid), (mid, hi)):
                child = TreeNode(
                    id=len(nodes),
                    level=node.level + 1,
                    height_below=node.height_below - 1,
                    leaf_range=rng,
                    parent=node,
                )
                nodes.append(child)
                kids.append(child)
            node.children = (kids[0], kids[1])
            nxt.extend(kids)
        frontier = nxt

    leaf_by_rank = {n.leaf_range[0]: n for n in nodes if n.is_leaf}
    for node in nodes:
        if node.is_leaf:
            continue
        mid = node.right.leaf_range[0]
        node.hat_left_leaf = leaf_by_rank[mid - 1].id
        node.hat_right_leaf = leaf_by_rank[mid].id
        node.owner_rank = mid - 1
    return DomainTree(root=root, nodes=nodes, P=P)


def build_grid(config=None, *, P: Optional[int] = None, N: Optional[int] = None,
               components: Optional[int] = None, hx: Optional[float] = None,
               hy: Optional[float] = None) -> Grid:
    """Build the global grid either from a problem config or from keywords.

    ``config`` may be any object exposing ``P``, ``N`` and ``pde`` (a
    :class:`~rsdsolve.fem_assembly.PdeKind`), plus optional ``hx``/``hy``.
    Missing element sizes default to ``1 / (N - 1)``.
    """
    if config is not None:
        P = config.P
        N = config.N
        components = config.pde.components
        hx = getattr(config, "hx", hx)
        hy = getattr(config, "hy", hy)
    if components is None:
        components = 1
    if P is None or N is None:
        raise ConfigurationError("both P and N are required")
    if P < 2 or not is_power_of_two(P):
        raise ConfigurationError(f"P must be a power of two >= 2, got {P!r}")
    if N < 3:
        raise ConfigurationError(f"N must be >= 3 (interface needs interior nodes), got {N!r}")
    if components < 1:
        raise ConfigurationError("components must be positive")
    for h in (hx, hy):
        if h is not None and not h > 0:
            raise ConfigurationError(f"mesh spacing must be positive, got hx={hx}, hy={hy}")
    return Grid(P=int(P), N=int(N), components=int(components),
                hx=None if hx is None else float(hx), hy=None if hy is None else float(hy))


def compute_index_sets(tree: DomainTree, grid: Grid) -> DomainTree:
    """Attach node-column ranges and DOF index sets to every tree node.

    A node spanning leaves ``[lo, hi)`` covers node columns
    ``lo*(N-1) .. hi*(N-1)``; its own DOFs exclude both end columns, which are
    either the physical boundary or an ancestor's interface.
    """
    if tree.P != grid.P:
        raise ConfigurationError(f"tree has P={tree.P} but grid has P={grid.P}")
    w = grid.N - 1
    for node in tree.nodes:
        lo, hi = node.leaf_range
        a, b = lo * w, hi * w
        node.x_range = (a, b)
        node.dofs = grid.column_dofs(a + 1, b - 1)
        if node.is_leaf:
            node.interface_col = None
            continue
        mid = node.right.leaf_range[0] * w
        node.interface_col = mid
        node.idx_VL = grid.column_dofs(a + 1, mid - 1)
        node.idx_VR = grid.column_dofs(mid + 1, b - 1)
        node.idx_I = grid.column_dofs(mid, mid)
    for node in tree.nodes:
        for arr in (node.dofs, node.idx_VL, node.idx_VR, node.idx_I):
            if arr is not None:
                arr.setflags(write=False)
    return tree
