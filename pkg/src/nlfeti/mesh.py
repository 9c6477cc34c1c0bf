"""Structured criss-cross triangulations of the unit square with a
surrounding constraint collar.

The computational domain is ``(0, 1)^2``; Dirichlet-type volume constraints
live on the collar ``[-delta, 1+delta]^2 \\ (0, 1)^2``.  Meshes are uniform:
every grid cell of side ``1/n`` is split into two triangles along its
main (lower-left to upper-right) diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quadrature import triangle_rule

# Node / element region labels.
INTERIOR = 0  # strictly inside (0,1)^2 (unknowns)
COLLAR = 1  # constrained nodes / collar elements


@dataclass
class Mesh:
    """Triangle mesh with region labels.

    Attributes
    ----------
    vertices : (n_vertices, 2) float array
    elements : (n_elements, 3) int array, counter-clockwise connectivity
    element_region : (n_elements,) int array (INTERIOR / COLLAR)
    node_region : (n_vertices,) int array (INTERIOR / COLLAR)
    h : float
        Maximum element diameter.
    spacing : float
        Grid spacing (1/n for structured meshes); equals h/sqrt(2).
    n : int
        Number of grid cells per unit length.
    delta : float
        Collar width the mesh was built for.
    """

    vertices: np.ndarray
    elements: np.ndarray
    element_region: np.ndarray
    node_region: np.ndarray
    h: float
    spacing: float
    n: int = 0
    delta: float = 0.0
    # Lattice layout of the structured mesh (cells per side); 0 for ad-hoc
    # meshes built directly from arrays.
    cells_per_side: int = 0
    _barycenters: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def barycenters(self) -> np.ndarray:
        if self._barycenters is None:
            self._barycenters = self.vertices[self.elements].mean(axis=1)
        return self._barycenters

    def element_vertices(self, e: int) -> np.ndarray:
        return self.vertices[self.elements[e]]

    @property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_region == INTERIOR)

    @property
    def collar_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_region == COLLAR)


def build_structured_mesh(n: int, delta: float) -> Mesh:
    """Triangulate ``[-delta, 1+delta]^2`` with a criss-cross grid.

    ``n`` is the number of cells per unit length; ``delta * n`` must be a
    (positive) integer so the collar is resolved exactly by the grid.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    m = delta * n
    if abs(m - round(m)) > 1e-9 or round(m) < 1:
        raise ValueError(
            f"delta * n must be a positive integer (got delta={delta}, n={n})"
        )
    m = int(round(m))
    N = n + 2 * m  # cells per side
    # Vertex lattice: (N+1)^2 points, x fastest.
    ii = np.arange(N + 1)
    xs = (ii - m) / n
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    # Two triangles per cell along the main diagonal, both counter-clockwise:
    # lower (v00, v10, v11), upper (v00, v11, v01).
    cx, cy = np.meshgrid(np.arange(N), np.arange(N), indexing="xy")
    v00 = (cy * (N + 1) + cx).ravel()
    v10 = v00 + 1
    v01 = v00 + (N + 1)
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.empty((2 * N * N, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper

    cxe = np.repeat(cx.ravel(), 2)
    cye = np.repeat(cy.ravel(), 2)
    inside = (cxe >= m) & (cxe < N - m) & (cye >= m) & (cye < N - m)
    element_region = np.where(inside, INTERIOR, COLLAR).astype(np.int8)

    ix = np.tile(ii, N + 1)
    iy = np.repeat(ii, N + 1)
    node_inside = (ix > m) & (ix < N - m) & (iy > m) & (iy < N - m)
    node_region = np.where(node_inside, INTERIOR, COLLAR).astype(np.int8)

    return Mesh(
        vertices=vertices,
        elements=elements,
        element_region=element_region,
        node_region=node_region,
        h=np.sqrt(2.0) / n,
        spacing=1.0 / n,
        n=n,
        delta=m / n,
        cells_per_side=N,
    )


def element_adjacency_graph(mesh: Mesh) -> dict[int, list[int]]:
    """Edge-sharing adjacency, built from a shared-edge dictionary."""
    edge_owner: dict[tuple[int, int], int] = {}
    adj: dict[int, list[int]] = {e: [] for e in range(mesh.n_elements)}
    for e, tri in enumerate(mesh.elements):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            key = (a, b) if a < b else (b, a)
            other = edge_owner.pop(key, None)
            if other is None:
                edge_owner[key] = e
            else:
                adj[e].append(other)
                adj[other].append(e)
    for e in adj:
        adj[e].sort()
    return adj


def shared_vertices(mesh: Mesh, e1: int, e2: int) -> np.ndarray:
    """Global ids of vertices shared by two elements."""
    return np.intersect1d(mesh.elements[e1], mesh.elements[e2])


def p1_gradients(vertices: np.ndarray) -> np.ndarray:
    """Gradients of the three P1 hat functions on a triangle, shape (3, 2)."""
    v = np.asarray(vertices, dtype=float)
    e1 = v[1] - v[0]
    e2 = v[2] - v[0]
    det = e1[0] * e2[1] - e1[1] * e2[0]
    # grad(lambda_i) from the inverse Jacobian transpose.
    g1 = np.array([e2[1], -e2[0]]) / det
    g2 = np.array([-e1[1], e1[0]]) / det
    return np.array([-g1 - g2, g1, g2])


def p1_values(vertices: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric (hat-function) values at points, shape (m, 3)."""
    v = np.asarray(vertices, dtype=float)
    pts = np.atleast_2d(points)
    T = np.column_stack([v[1] - v[0], v[2] - v[0]])
    loc = np.linalg.solve(T, (pts - v[0]).T).T
    lam1, lam2 = loc[:, 0], loc[:, 1]
    return np.column_stack([1.0 - lam1 - lam2, lam1, lam2])


def l2_error(
    mesh: Mesh,
    nodal_values: np.ndarray,
    exact,
    degree: int = 4,
) -> float:
    """L2 norm of ``u_h - exact`` over the interior elements.

    ``nodal_values`` has shape (n_vertices,) for scalar fields or
    (n_vertices, c) for vector fields; ``exact`` maps (m, 2) points to
    matching values.
    """
    vals = np.asarray(nodal_values, dtype=float)
    scalar = vals.ndim == 1
    if scalar:
        vals = vals[:, None]
    bary, wts = triangle_rule(degree)
    total = 0.0
    els = np.flatnonzero(mesh.element_region == INTERIOR)
    tri_verts = mesh.vertices[mesh.elements[els]]  # (ne, 3, 2)
    pts = np.einsum("qb,ebx->eqx", bary, tri_verts)  # (ne, q, 2)
    uh = np.einsum("qb,ebc->eqc", bary, vals[mesh.elements[els]])  # (ne, q, c)
    ue = np.asarray(exact(pts.reshape(-1, 2)), dtype=float)
    if ue.ndim == 1:
        ue = ue[:, None]
    ue = ue.reshape(uh.shape)
    area = _areas(tri_verts)
    diff2 = ((uh - ue) ** 2).sum(axis=2)  # (ne, q)
    total = float(np.einsum("e,q,eq->", area, wts, diff2))
    return float(np.sqrt(total))


def _areas(tri_verts: np.ndarray) -> np.ndarray:
    a = tri_verts[:, 1] - tri_verts[:, 0]
    b = tri_verts[:, 2] - tri_verts[:, 0]
    return 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])


def dump_mesh(mesh: Mesh) -> str:
    """Plain-text mesh dump: header, vertex lines, element lines."""
    lines = [f"mesh {mesh.n_vertices} {mesh.n_elements} n={mesh.n} delta={mesh.delta:.17g}"]
    for i, (x, y) in enumerate(mesh.vertices):
        lines.append(f"v {i} {x:.17g} {y:.17g} {int(mesh.node_region[i])}")
    for e, tri in enumerate(mesh.elements):
        lines.append(
            f"e {e} {tri[0]} {tri[1]} {tri[2]} {int(mesh.element_region[e])}"
        )
    return "\n".join(lines) + "\n"
