"""Overlapping subdomain construction for nonlocal problems.

A rectangular partition of the interior elements is grown into an
overlapping family: every pair of elements whose interaction balls can
touch must end up together in at least one subdomain, so the global
bilinear form can be split into subdomain forms weighted by the overlap
counting function.  The module also builds the interface constraint
matrix, multiplicity scaling, and rigid-mode basis used by the FETI
solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import COLLAR, INTERIOR, Mesh, element_adjacency_graph


class SubdivisionError(RuntimeError):
    """Raised when a constructed subdivision violates its coverage or
    rank contracts."""


# ---------------------------------------------------------------------------
# Partition and nonlocal extension


def partition_rectangles(mesh: Mesh, k1: int, k2: int) -> np.ndarray:
    """Assign every interior element to one of k1 x k2 rectangles.

    Rectangle boundaries are snapped to the nearest grid line; ownership
    is decided by the element barycenter.  Returns an owner index per
    element (-1 on collar elements, which are attached later by the
    horizon-neighborhood rule).
    """
    if k1 < 1 or k2 < 1:
        raise ValueError("k1 and k2 must be at least 1")
    if mesh.cells_per_side == 0:
        raise ValueError("partitioning requires a structured mesh")
    interior = mesh.element_region == INTERIOR
    if k1 * k2 > int(interior.sum()):
        raise ValueError("more subdomains than interior elements")
    n = mesh.n
    # Snapped cut positions in cell units, 0 = left edge of the unit square.
    cuts1 = np.round(n * np.arange(k1 + 1) / k1).astype(np.int64)
    cuts2 = np.round(n * np.arange(k2 + 1) / k2).astype(np.int64)
    bary = mesh.barycenters
    cellx = np.floor(bary[:, 0] * n).astype(np.int64)
    celly = np.floor(bary[:, 1] * n).astype(np.int64)
    i1 = np.clip(np.searchsorted(cuts1, cellx, side="right") - 1, 0, k1 - 1)
    i2 = np.clip(np.searchsorted(cuts2, celly, side="right") - 1, 0, k2 - 1)
    owner = i2 * k1 + i1
    owner[~interior] = -1
    return owner


@dataclass
class Subdivision:
    """Overlapping subdomain family over a mesh.

    ``owned_elements[k]`` are the disjoint rectangles; ``extended_elements[k]``
    additionally contain the half-horizon overlap ring and the constrained
    collar elements within the horizon.  ``unknown_nodes[k]`` are all
    unconstrained nodes seen by subdomain k, split into ``inner_nodes``
    (multiplicity 1) and ``interface_nodes`` (shared with another
    subdomain); ``constrained_nodes[k]`` carry Dirichlet-type data.
    """

    mesh: Mesh
    k1: int
    k2: int
    owned_elements: list[np.ndarray]
    extended_elements: list[np.ndarray]
    collar_elements: list[np.ndarray]
    unknown_nodes: list[np.ndarray]
    inner_nodes: list[np.ndarray]
    interface_nodes: list[np.ndarray]
    constrained_nodes: list[np.ndarray]
    C: sp.csr_matrix
    C_elem: sp.csr_matrix
    floating: np.ndarray
    node_zeta: np.ndarray = field(repr=False, default=None)

    @property
    def K(self) -> int:
        return self.k1 * self.k2


def _reach(delta: float, ball_norm: str) -> float:
    """Largest Euclidean distance between interacting points.

    Interaction balls in the max norm reach sqrt(2) times farther in
    Euclidean distance than their radius."""
    return delta * np.sqrt(2.0) if ball_norm == "linf" else delta


def extend_nonlocal(mesh: Mesh, owner: np.ndarray, delta: float,
                    ball_norm: str = "l2", check: bool = True) -> Subdivision:
    """Grow a rectangular partition into an overlapping subdivision.

    Each subdomain collects, by breadth-first search over the element
    adjacency graph, the neighboring interior elements whose barycenter
    lies within half a horizon (plus a mesh-size safety margin) of its
    owned barycenters, and the collar elements within a full horizon.
    The resulting family is verified to contain every interacting
    element pair in at least one common subdomain.
    """
    K = int(owner.max()) + 1
    bary = mesh.barycenters
    adj = element_adjacency_graph(mesh)
    interior = mesh.element_region == INTERIOR
    # Safety margins: ownership is decided on barycenters, so the
    # half-horizon criterion needs slack of one element diameter to cover
    # every pair the conservative interaction predicate admits.  Any two
    # interacting barycenters lie within reach + h of each other; their
    # midpoint belongs to some owned rectangle, whose nearest owned
    # barycenter is at most one further diameter away.
    reach = _reach(delta, ball_norm)
    r_ext = 0.5 * (reach + mesh.h) + mesh.h + 1e-12
    r_col = reach + mesh.h + 1e-12

    owned: list[np.ndarray] = []
    extended: list[np.ndarray] = []
    collars: list[np.ndarray] = []
    collar_ids = np.flatnonzero(~interior)
    for k in range(K):
        own = np.flatnonzero(owner == k)
        tree = cKDTree(bary[own])
        member = np.zeros(mesh.n_elements, dtype=bool)
        member[own] = True
        frontier = list(own)
        while frontier:
            cand = sorted(
                {e2 for e in frontier for e2 in adj[e]
                 if not member[e2] and interior[e2]}
            )
            if not cand:
                break
            d, _ = tree.query(bary[cand])
            take = [e for e, dist in zip(cand, d) if dist <= r_ext]
            member[take] = True
            frontier = take
        ext = np.flatnonzero(member)
        dcol, _ = tree.query(bary[collar_ids])
        col = collar_ids[dcol <= r_col]
        owned.append(own)
        extended.append(ext)
        collars.append(col)

    # Membership matrices over the extended sets (interior extension plus
    # attached collar elements).
    rows = np.concatenate(
        [np.concatenate([extended[k], collars[k]]) for k in range(K)]
    )
    cols = np.concatenate(
        [np.full(len(extended[k]) + len(collars[k]), k) for k in range(K)]
    )
    C_elem = sp.csr_matrix(
        (np.ones(len(rows), dtype=np.int64), (rows, cols)),
        shape=(mesh.n_elements, K),
    )
    # Node membership: a node belongs to k when it is a vertex of any
    # element of the extended set of k.
    nrows, ncols = [], []
    for k in range(K):
        els = np.concatenate([extended[k], collars[k]])
        nodes = np.unique(mesh.elements[els])
        nrows.append(nodes)
        ncols.append(np.full(len(nodes), k))
    C = sp.csr_matrix(
        (np.ones(sum(len(r) for r in nrows), dtype=np.int64),
         (np.concatenate(nrows), np.concatenate(ncols))),
        shape=(mesh.n_vertices, K),
    )

    zeta = np.asarray(C.sum(axis=1)).ravel().astype(np.int64)
    unknown_nodes, inner_nodes, interface_nodes, constrained = [], [], [], []
    unconstrained = mesh.node_region == INTERIOR
    for k in range(K):
        nodes = nrows[k]
        unk = nodes[unconstrained[nodes]]
        unknown_nodes.append(unk)
        inner_nodes.append(unk[zeta[unk] == 1])
        interface_nodes.append(unk[zeta[unk] > 1])
        constrained.append(nodes[~unconstrained[nodes]])

    # A subdomain floats only when it sees no constrained data at all:
    # even without attached collar elements, extension elements that
    # touch constrained nodes pin the local operator.
    floating = np.array([len(c) == 0 for c in constrained])

    sub = Subdivision(
        mesh=mesh, k1=0, k2=0,
        owned_elements=owned, extended_elements=extended,
        collar_elements=collars,
        unknown_nodes=unknown_nodes, inner_nodes=inner_nodes,
        interface_nodes=interface_nodes, constrained_nodes=constrained,
        C=C, C_elem=C_elem, floating=floating, node_zeta=zeta,
    )
    if check:
        verify_coverage(mesh, sub, delta, ball_norm)
    return sub


def build_subdivision(mesh: Mesh, k1: int, k2: int, delta: float | None = None,
                      ball_norm: str = "l2", check: bool = True) -> Subdivision:
    """Partition into k1 x k2 rectangles and extend nonlocally."""
    owner = partition_rectangles(mesh, k1, k2)
    sub = extend_nonlocal(mesh, owner, delta if delta is not None else mesh.delta,
                          ball_norm=ball_norm, check=check)
    sub.k1, sub.k2 = k1, k2
    return sub


def verify_coverage(mesh: Mesh, sub: Subdivision, delta: float,
                    ball_norm: str = "l2") -> None:
    """Assert that every interacting element pair (with at least one
    interior element, i.e. every pair contributing to the discrete
    forms) lies in a common subdomain.

    Raises SubdivisionError on the first violation.
    """
    bary = mesh.barycenters
    tree = cKDTree(bary)
    pairs = tree.query_pairs(r=_reach(delta, ball_norm) + mesh.h + 1e-9,
                             output_type="ndarray")
    interior = mesh.element_region == INTERIOR
    keep = interior[pairs[:, 0]] | interior[pairs[:, 1]]
    pairs = pairs[keep]
    Z = sub.C_elem
    # Element self-pairs: every interior element must be in some subdomain.
    self_cnt = np.asarray(Z.sum(axis=1)).ravel()
    bad = np.flatnonzero(interior & (self_cnt == 0))
    if len(bad):
        raise SubdivisionError(
            f"element {bad[0]} belongs to no subdomain"
        )
    for lo in range(0, len(pairs), 500_000):
        chunk = pairs[lo:lo + 500_000]
        cnt = np.asarray(
            Z[chunk[:, 0]].multiply(Z[chunk[:, 1]]).sum(axis=1)
        ).ravel()
        bad = np.flatnonzero(cnt == 0)
        if len(bad):
            i, j = chunk[bad[0]]
            raise SubdivisionError(
                f"interacting element pair ({i}, {j}) is covered by no "
                f"subdomain (barycenter distance "
                f"{np.linalg.norm(bary[i] - bary[j]):.3g}, delta {delta:.3g})"
            )


# ---------------------------------------------------------------------------
# Counting function


@dataclass
class CountingFunction:
    """Overlap multiplicities of a subdivision.

    ``node(i, j)`` and ``element(e1, e2)`` count the subdomains whose
    extended sets contain both arguments; the diagonal values are the
    usual per-node / per-element multiplicities.
    """

    C: sp.csr_matrix
    C_elem: sp.csr_matrix
    node_diag: np.ndarray
    elem_diag: np.ndarray

    def node(self, i, j) -> np.ndarray:
        i = np.atleast_1d(np.asarray(i))
        j = np.atleast_1d(np.asarray(j))
        return np.asarray(self.C[i].multiply(self.C[j]).sum(axis=1)).ravel()

    def element(self, e1, e2) -> np.ndarray:
        e1 = np.atleast_1d(np.asarray(e1))
        e2 = np.atleast_1d(np.asarray(e2))
        return np.asarray(
            self.C_elem[e1].multiply(self.C_elem[e2]).sum(axis=1)
        ).ravel()


def build_counting(mesh: Mesh, sub: Subdivision) -> CountingFunction:
    return CountingFunction(
        C=sub.C.tocsr(),
        C_elem=sub.C_elem.tocsr(),
        node_diag=np.asarray(sub.C.sum(axis=1)).ravel().astype(np.int64),
        elem_diag=np.asarray(sub.C_elem.sum(axis=1)).ravel().astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Constraints, scaling, rigid modes


@dataclass
class ConstraintSet:
    """Interface continuity constraints and their scaled variants.

    ``B`` acts on the concatenation of per-subdomain interface dofs
    (offsets in ``offsets``); every row links the copy of one physical
    dof held by the lowest-index subdomain to exactly one other copy.
    ``B_D = (B D^-1 B^T)^-1 B D^-1`` with D the diagonal multiplicity
    scaling; ``Z`` holds the rigid modes of the floating subdomains,
    restricted to their interface dofs.
    """

    B: sp.csr_matrix
    D: np.ndarray
    B_D: sp.csr_matrix
    Z: sp.csr_matrix
    offsets: np.ndarray
    components: int
    n_modes: list[int]


def build_constraints(mesh: Mesh, sub: Subdivision,
                      dof_multiplicity: int = 1) -> ConstraintSet:
    """Build B, D, B_D over the concatenated interface dofs.

    For a physical node held by m subdomains the chain anchored at the
    lowest subdomain index contributes m - 1 rows per dof component; the
    block diagonal B D^-1 B^T (one block per node) is factorized exactly,
    giving B_D without ever forming a large inverse.
    """
    c = dof_multiplicity
    K = len(sub.interface_nodes)
    sizes = np.array([len(g) for g in sub.interface_nodes])
    offsets = np.concatenate([[0], np.cumsum(c * sizes)])
    total = int(offsets[-1])

    # local position of each global node within each subdomain's
    # interface list
    pos = [dict(zip(g.tolist(), range(len(g)))) for g in sub.interface_nodes]

    # subdomains per shared node, ascending
    node_subs: dict[int, list[int]] = {}
    for k in range(K):
        for node in sub.interface_nodes[k]:
            node_subs.setdefault(int(node), []).append(k)

    rows_b, cols_b, vals_b = [], [], []
    rows_d, cols_d, vals_d = [], [], []
    D = np.empty(total)
    for k in range(K):
        g = sub.interface_nodes[k]
        z = sub.node_zeta[g].astype(float)
        D[offsets[k]:offsets[k + 1]] = np.repeat(z, c)

    row = 0
    for node in sorted(node_subs):
        ks = node_subs[node]
        m = len(ks)
        if m < 2:
            raise SubdivisionError(
                f"interface node {node} has multiplicity {m}"
            )
        anchor = ks[0]
        zinv = 1.0 / float(m)
        # block of B D^-1 B^T for this node: zinv * (I + ones)
        # whose inverse is (1/zinv) * (I - ones/m)
        dofs = [offsets[k] + c * pos[k][node] for k in ks]
        for comp in range(c):
            local_rows = list(range(row, row + m - 1))
            for j in range(1, m):
                r = row + j - 1
                rows_b += [r, r]
                cols_b += [dofs[0] + comp, dofs[j] + comp]
                vals_b += [1.0, -1.0]
            # rows of B_D = blockinv @ (B D^-1) for this node
            Bn = np.zeros((m - 1, m))
            Bn[:, 0] = 1.0
            Bn[np.arange(m - 1), np.arange(1, m)] = -1.0
            blk = zinv * (Bn @ Bn.T)
            try:
                L = np.linalg.cholesky(blk)
            except np.linalg.LinAlgError as exc:
                raise SubdivisionError(
                    f"constraint block for node {node} is rank deficient"
                ) from exc
            if np.min(np.diag(L)) ** 2 <= 1e-12:
                raise SubdivisionError(
                    f"constraint block for node {node} has a near-zero pivot"
                )
            BD = np.linalg.solve(blk, zinv * Bn)
            for a, r in enumerate(local_rows):
                for j in range(m):
                    rows_d.append(r)
                    cols_d.append(dofs[j] + comp)
                    vals_d.append(BD[a, j])
            row += m - 1

    M_C = row
    B = sp.csr_matrix((vals_b, (rows_b, cols_b)), shape=(M_C, total))
    B_D = sp.csr_matrix((vals_d, (rows_d, cols_d)), shape=(M_C, total))
    Z = build_rigid_modes(sub, dof_multiplicity)
    return ConstraintSet(B=B, D=D, B_D=B_D, Z=Z, offsets=offsets,
                         components=c, n_modes=_mode_counts(sub, c))


def _mode_counts(sub: Subdivision, c: int) -> list[int]:
    per = 1 if c == 1 else 3
    return [per if f else 0 for f in sub.floating]


def build_rigid_modes(sub: Subdivision, dof_multiplicity: int = 1) -> sp.csr_matrix:
    """Null-space basis of the floating subdomains, restricted to
    interface dofs.

    Scalar problems get one constant column per floating subdomain;
    vector problems get two translations and one rotation about the
    subdomain barycenter, orthonormalized blockwise.
    """
    c = dof_multiplicity
    sizes = np.array([len(g) for g in sub.interface_nodes])
    offsets = np.concatenate([[0], np.cumsum(c * sizes)])
    cols = []
    total = int(offsets[-1])
    for k, is_floating in enumerate(sub.floating):
        if not is_floating:
            continue
        g = sub.interface_nodes[k]
        xy = sub.mesh.vertices[g]
        if c == 1:
            block = np.ones((len(g), 1))
        else:
            ctr = xy.mean(axis=0)
            t1 = np.zeros((len(g), 2))
            t1[:, 0] = 1.0
            t2 = np.zeros((len(g), 2))
            t2[:, 1] = 1.0
            rot = np.column_stack([-(xy[:, 1] - ctr[1]), xy[:, 0] - ctr[0]])
            block = np.stack([t1, t2, rot], axis=2).reshape(len(g) * 2, 3)
        q, _ = np.linalg.qr(block)
        for j in range(q.shape[1]):
            col = sp.csr_matrix(
                (q[:, j], (np.arange(offsets[k], offsets[k + 1]),
                           np.zeros(q.shape[0], dtype=np.int64))),
                shape=(total, 1),
            )
            cols.append(col)
    if not cols:
        return sp.csr_matrix((total, 0))
    return sp.hstack(cols, format="csr")


def dump_subdivision(sub: Subdivision) -> str:
    """CSV dump: per-element owner list and multiplicity.

    Columns: element, barycenter_x, barycenter_y, zeta, subdomains
    (semicolon-separated ids).
    """
    mesh = sub.mesh
    bary = mesh.barycenters
    Z = sub.C_elem.tocsr()
    lines = ["element,x,y,zeta,subdomains"]
    indptr, indices = Z.indptr, Z.indices
    for e in range(mesh.n_elements):
        ks = indices[indptr[e]:indptr[e + 1]]
        lines.append(
            f"{e},{bary[e, 0]:.17g},{bary[e, 1]:.17g},{len(ks)},"
            + ";".join(str(int(k)) for k in ks)
        )
    return "\n".join(lines) + "\n"
