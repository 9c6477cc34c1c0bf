"""Stiffness and load assembly for nonlocal bilinear forms.

The bilinear form couples element pairs.  For a pair (E, F) the local
contribution is assembled over the union patch of their vertices,

    M[a, b] = int_E int_{F cap B(x)} gamma(x, y) dpsi_a dpsi_b dy dx,

with ``dpsi_a(x, y) = psi_a(y) - psi_a(x)`` the hat-function difference.
The swapped integral over (F, E) equals M, so each unordered pair is
integrated once and scattered with factor 2 (factor 1 when E == F).

On the structured criss-cross mesh every pair belongs to a translation
class (cell offset plus the two triangle types), so each class matrix is
computed once per mesh and reused for every pair in the class, both for
global and for weighted subdomain assembly.

Element pairs with coinciding or touching supports and a singular kernel
use singularity-aware schemes: coinciding pairs integrate exactly in
relative polar coordinates (a Duffy-type transformation with Gauss-Jacobi
radial weights); pairs sharing an edge or a vertex are pulled back to
relative coordinates anchored at the shared feature, where the kernel
homogeneity yields a closed-form radial integral along every direction,
horizon cut included.  Close-but-disjoint pairs are uniformly subdivided
before the product rule is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import (
    _segment_circle_params,
    ball_element_intersection,
    closest_point_triangle,
    disk_interaction_cells,
    square_interaction_cells,
)
from .kernels import KernelSpec, kernel_on_support
from .mesh import COLLAR, INTERIOR, Mesh, p1_gradients, p1_values
from .quadrature import gauss01, gauss_jacobi01, map_to_physical, triangle_rule


def default_strategy(spec: KernelSpec) -> str:
    """exact square clipping for the max-norm family, polar rules with
    exact radial horizon cut for the Euclidean-ball families."""
    return "exact_linf" if spec.ball_norm == "linf" else "polar"


@dataclass(frozen=True)
class QuadratureConfig:
    """Rule orders for pair integration.

    ``outer_degree`` / ``inner_degree`` drive well-separated pairs;
    ``radial_points``/``angular_points`` form the polar rule for
    coinciding pairs; ``transform_points`` is the tensor-Gauss order of
    the edge/vertex-touching transforms; ``near_subdiv`` is the uniform
    subdivision depth for close-but-disjoint singular pairs;
    ``cap_levels`` refines the circular-segment triangles of Euclidean
    ball clipping; ``grade_levels``/``grade_ratio`` control the
    geometric grading; ``load_degree`` is the load-vector rule.
    """

    outer_degree: int = 3
    inner_degree: int = 3
    radial_points: int = 4
    angular_points: int = 12
    transform_points: int = 12
    transform_panels: int = 8
    cut_subdiv: int = 3
    arc_segments: int = 3
    polar_angular: int = 4
    polar_radial: int = 8
    cap_levels: int = 3
    grade_levels: int = 16
    grade_ratio: float = 0.5
    near_eta: float = 1.0
    load_degree: int = 4

    def refined(self) -> "QuadratureConfig":
        """All orders bumped (for self-convergence checks)."""
        return QuadratureConfig(
            outer_degree=self.outer_degree + 2,
            inner_degree=self.inner_degree + 2,
            radial_points=2 * self.radial_points,
            angular_points=2 * self.angular_points,
            transform_points=self.transform_points + 4,
            transform_panels=self.transform_panels + 4,
            cut_subdiv=self.cut_subdiv + 1,
            arc_segments=2 * self.arc_segments,
            polar_angular=self.polar_angular + 4,
            polar_radial=self.polar_radial + 6,
            cap_levels=self.cap_levels + 2,
            grade_levels=self.grade_levels + 6,
            grade_ratio=self.grade_ratio,
            near_eta=self.near_eta,
            load_degree=self.load_degree + 1,
        )


# ---------------------------------------------------------------------------
# Pair integration


def _cross2(a: np.ndarray, b: np.ndarray) -> float:
    """Scalar cross product of 2-vectors."""
    return float(a[0] * b[1] - a[1] * b[0])


def _patch(ids1: np.ndarray, ids2: np.ndarray):
    """Union patch of two elements' vertex ids.

    Returns (patch ids, loc1, loc2) where loc1[a] is the local vertex
    index of patch node a in the first element (-1 when absent).
    """
    patch = list(ids1)
    for g in ids2:
        if g not in patch:
            patch.append(g)
    loc1 = [list(ids1).index(g) if g in list(ids1) else -1 for g in patch]
    loc2 = [list(ids2).index(g) if g in list(ids2) else -1 for g in patch]
    return np.asarray(patch), np.asarray(loc1), np.asarray(loc2)


def _basis_differences(
    v1: np.ndarray, v2: np.ndarray, loc1: np.ndarray, loc2: np.ndarray,
    X: np.ndarray, Y: np.ndarray,
) -> np.ndarray:
    """dpsi_a = psi_a(y) - psi_a(x) for every patch node, shape (m, p)."""
    phi1 = p1_values(v1, X)  # (m, 3)
    phi2 = p1_values(v2, Y)
    m = X.shape[0]
    D = np.zeros((m, len(loc1)))
    for a in range(len(loc1)):
        if loc2[a] >= 0:
            D[:, a] += phi2[:, loc2[a]]
        if loc1[a] >= 0:
            D[:, a] -= phi1[:, loc1[a]]
    return D


def _contract(spec: KernelSpec, W: np.ndarray, X: np.ndarray, Y: np.ndarray,
              D: np.ndarray) -> np.ndarray:
    """Weighted contraction sum_m W K(x,y) dpsi_a dpsi_b -> patch matrix."""
    if spec.components == 1:
        K = kernel_on_support(spec, Y - X)
        return (D * (W * K)[:, None]).T @ D
    K = kernel_on_support(spec, Y - X)  # (m, 2, 2)
    M = np.einsum("m,mij,ma,mb->aibj", W, K, D, D, optimize=True)
    p = D.shape[1]
    return M.reshape(2 * p, 2 * p)


def _polar_inner_points(
    x: np.ndarray, tri: np.ndarray, spec: KernelSpec, quad: QuadratureConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature for int_{tri cap B(x, delta)} around an exterior point x
    in polar coordinates: per direction the radial interval [entry, exit]
    is clipped exactly at the horizon, so no geometric ball approximation
    enters.  The angular range is paneled at the triangle vertex angles
    and at the angles where the horizon circle crosses a triangle edge,
    which are the only non-smooth directions.
    """
    delta = spec.delta
    d = np.linalg.norm(tri - x[None, :], axis=1)
    diam = max(np.linalg.norm(tri[1] - tri[0]), np.linalg.norm(tri[2] - tri[0]),
               np.linalg.norm(tri[2] - tri[1]))
    if d.max() <= delta and d.min() >= 2.0 * diam:
        # entirely inside the horizon and well separated: smooth integrand
        bary, wts = triangle_rule(quad.inner_degree)
        return map_to_physical(tri, bary, wts)
    bounds = [float(np.arctan2(v[1] - x[1], v[0] - x[0])) for v in tri]
    edges = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        e = b - a
        n = np.array([-e[1], e[0]])
        if n @ (tri[(i + 2) % 3] - a) < 0:
            n = -n
        edges.append((a, n))
        for t in _segment_circle_params(a, b, x, delta):
            p = a + t * e
            bounds.append(float(np.arctan2(p[1] - x[1], p[0] - x[0])))
    th = np.sort(np.asarray(bounds))
    th = np.concatenate([th, [th[0] + 2.0 * np.pi]])
    ga, gwa = gauss01(quad.polar_angular)
    gr, gwr = gauss01(quad.polar_radial)
    pts_out: list[np.ndarray] = []
    w_out: list[np.ndarray] = []
    for t0, t1 in zip(th[:-1], th[1:]):
        width = t1 - t0
        if width < 1e-14:
            continue
        theta = t0 + width * ga
        u = np.column_stack([np.cos(theta), np.sin(theta)])  # (na, 2)
        lo = np.zeros(len(theta))
        hi = np.full(len(theta), delta)
        ok = np.ones(len(theta), dtype=bool)
        for a, n in edges:
            num = n @ (x - a)
            den = u @ n
            small = np.abs(den) < 1e-14
            ok &= ~(small & (num < 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                rr = -num / den
            pos = den > 1e-14
            neg = den < -1e-14
            lo = np.where(pos, np.maximum(lo, rr), lo)
            hi = np.where(neg, np.minimum(hi, rr), hi)
        ok &= hi > lo + 1e-15
        if not ok.any():
            continue
        lo, hi, u = lo[ok], hi[ok], u[ok]
        wa = gwa[ok] * width
        r = lo[:, None] + (hi - lo)[:, None] * gr[None, :]  # (na, nr)
        w = (wa * (hi - lo))[:, None] * gwr[None, :] * r
        pts_out.append((x[None, None, :] + r[:, :, None] * u[:, None, :])
                       .reshape(-1, 2))
        w_out.append(w.ravel())
    if not pts_out:
        return np.empty((0, 2)), np.empty(0)
    return np.concatenate(pts_out), np.concatenate(w_out)


def _inner_rule_points(
    x: np.ndarray, v2: np.ndarray, spec: KernelSpec, strategy: str,
    quad: QuadratureConfig, singular_near: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature points/weights for int_{v2 cap B(x)} around outer point x.

    For singular kernels the inner element is fanned around its closest
    point to x and geometrically graded toward it, so the near-singular
    integrand is resolved at every scale down to dist(x, v2).
    """
    if strategy == "polar":
        return _polar_inner_points(x, v2, spec, quad)
    diam = max(np.linalg.norm(v2[1] - v2[0]), np.linalg.norm(v2[2] - v2[0]),
               np.linalg.norm(v2[2] - v2[1]))
    tris: list[np.ndarray]
    if not singular_near:
        tris = [v2]
    else:
        p = closest_point_triangle(x, v2)
        dist = np.linalg.norm(x - p)
        if dist >= quad.near_eta * diam:
            tris = [v2]
        else:
            tris = _fan_graded(v2, p, dist, quad)
    bary, wts = triangle_rule(quad.inner_degree)
    pts_out: list[np.ndarray] = []
    w_out: list[np.ndarray] = []
    delta = spec.delta
    linf = spec.ball_norm == "linf"
    for tri in tris:
        # fast paths: triangle entirely inside / outside the ball
        z = tri - x
        if linf:
            inside_all = np.max(np.abs(z)) <= delta
        else:
            inside_all = np.max(np.einsum("ij,ij->i", z, z)) <= delta * delta
        if inside_all:
            subs = [tri]
        elif (not linf
              and np.linalg.norm(x - closest_point_triangle(x, tri)) >= delta):
            continue
        else:
            subs = ball_element_intersection(tri, x, delta, strategy,
                                             quad.cap_levels)
        for sub in subs:
            pts, w = map_to_physical(sub, bary, wts)
            pts_out.append(pts)
            w_out.append(w)
    if not pts_out:
        return np.empty((0, 2)), np.empty(0)
    return np.concatenate(pts_out), np.concatenate(w_out)


def _fan_graded(v2: np.ndarray, apex: np.ndarray, dist: float,
                quad: QuadratureConfig) -> list[np.ndarray]:
    """Fan v2 around ``apex`` and grade each fan triangle toward it."""
    out: list[np.ndarray] = []
    q = quad.grade_ratio
    for i in range(3):
        a, b = v2[i], v2[(i + 1) % 3]
        tri = np.array([apex, a, b])
        area = 0.5 * abs(_cross2(a - apex, b - apex))
        if area < 1e-30:
            continue
        size = max(np.linalg.norm(a - apex), np.linalg.norm(b - apex))
        if dist > 0:
            levels = int(np.ceil(np.log(size / dist) / np.log(1.0 / q)))
        else:
            levels = quad.grade_levels
        levels = int(np.clip(levels, 0, quad.grade_levels))
        out.extend(_rings_toward_vertex(tri, 0, levels, q))
    return out


def _rings_toward_vertex(tri: np.ndarray, apex_idx: int, levels: int,
                         q: float) -> list[np.ndarray]:
    """Geometric rings contracting toward a vertex, innermost core kept."""
    p = tri[apex_idx]
    a = tri[(apex_idx + 1) % 3]
    b = tri[(apex_idx + 2) % 3]
    out: list[np.ndarray] = []
    s_hi = 1.0
    for _ in range(levels):
        s_lo = s_hi * q
        c0 = p + s_hi * (a - p)
        c1 = p + s_hi * (b - p)
        c2 = p + s_lo * (b - p)
        c3 = p + s_lo * (a - p)
        out.append(np.array([c0, c1, c2]))
        out.append(np.array([c0, c2, c3]))
        s_hi = s_lo
    out.append(np.array([p, p + s_hi * (a - p), p + s_hi * (b - p)]))
    return [t for t in out if 0.5 * abs(_cross2(t[1] - t[0], t[2] - t[0])) > 1e-30]


def subdivide_triangle(tri: np.ndarray, levels: int) -> list[np.ndarray]:
    """Uniform midpoint subdivision into 4^levels congruent triangles."""
    out = [np.asarray(tri, dtype=float)]
    for _ in range(levels):
        nxt = []
        for t in out:
            m01 = 0.5 * (t[0] + t[1])
            m12 = 0.5 * (t[1] + t[2])
            m20 = 0.5 * (t[2] + t[0])
            nxt.extend([
                np.array([t[0], m01, m20]),
                np.array([m01, t[1], m12]),
                np.array([m20, m12, t[2]]),
                np.array([m01, m12, m20]),
            ])
        out = nxt
    return out


def regular_pair_matrix(
    v1: np.ndarray, v2: np.ndarray, loc1: np.ndarray, loc2: np.ndarray,
    spec: KernelSpec, strategy: str, quad: QuadratureConfig,
    outer_tris: list[np.ndarray] | None = None,
    outer_degree: int | None = None,
    inner_tris: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Pair matrix by outer rule x (clipped) inner rule."""
    bary, wts = triangle_rule(outer_degree or quad.outer_degree)
    if outer_tris is None:
        outer_tris = [v1]
        if spec.singular:
            # separated but close pairs: grade the outer element toward
            # the near region as well
            q = closest_point_triangle(v1.mean(axis=0), v2)
            p = closest_point_triangle(q, v1)
            q = closest_point_triangle(p, v2)
            dist = float(np.linalg.norm(p - q))
            diam = max(np.linalg.norm(v1[1] - v1[0]),
                       np.linalg.norm(v1[2] - v1[0]),
                       np.linalg.norm(v1[2] - v1[1]))
            if dist < quad.near_eta * diam:
                outer_tris = _fan_graded(v1, p, max(dist, 0.25 * diam), quad)
    if inner_tris is None:
        inner_tris = [v2]
    singular_near = spec.singular
    p = len(loc1)
    c = spec.components
    M = np.zeros((p * c, p * c))
    Xs, Ys, Ws = [], [], []
    pending = 0

    def flush():
        nonlocal Xs, Ys, Ws, pending
        X = np.concatenate(Xs)
        Y = np.concatenate(Ys)
        W = np.concatenate(Ws)
        D = _basis_differences(v1, v2, loc1, loc2, X, Y)
        Xs, Ys, Ws = [], [], []
        pending = 0
        return _contract(spec, W, X, Y, D)

    for tri in outer_tris:
        pts_x, w_x = map_to_physical(tri, bary, wts)
        for xq, wq in zip(pts_x, w_x):
            for itri in inner_tris:
                pts_y, w_y = _inner_rule_points(xq, itri, spec, strategy,
                                                quad, singular_near)
                if len(w_y) == 0:
                    continue
                Xs.append(np.broadcast_to(xq, pts_y.shape))
                Ys.append(pts_y)
                Ws.append(wq * w_y)
                pending += len(w_y)
            if pending > 500_000:
                M += flush()
    if pending:
        M += flush()
    return M


def _patch_gradients(
    v1: np.ndarray, v2: np.ndarray, loc1: np.ndarray, loc2: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(P1, P2): hat-function gradients per patch node on each element,
    zero rows for patch nodes absent from an element."""
    g1 = p1_gradients(v1)
    g2 = p1_gradients(v2)
    p = len(loc1)
    P1 = np.zeros((p, 2))
    P2 = np.zeros((p, 2))
    for a in range(p):
        if loc1[a] >= 0:
            P1[a] = g1[loc1[a]]
        if loc2[a] >= 0:
            P2[a] = g2[loc2[a]]
    return P1, P2


def _tensor_contract(spec: KernelSpec, W: np.ndarray, m: np.ndarray,
                     D: np.ndarray) -> np.ndarray:
    """sum_q W[q] K(m[q]) D[q,a] D[q,b], interleaved for vector kernels."""
    K = kernel_on_support(spec, m)
    if spec.components == 1:
        return (D * (W * K)[:, None]).T @ D
    M = np.einsum("q,qij,qa,qb->aibj", W, K, D, D, optimize=True)
    p = D.shape[1]
    return M.reshape(2 * p, 2 * p)


def common_vertex_pair_matrix(
    v1: np.ndarray, v2: np.ndarray, loc1: np.ndarray, loc2: np.ndarray,
    spec: KernelSpec, quad: QuadratureConfig,
) -> np.ndarray:
    """Singular kernel, elements sharing exactly one vertex.

    Both parametrizations are anchored at the shared vertex; scaling out
    the joint distance rho removes the singularity and, because the
    kernel is homogeneous and hat differences are linear, the radial
    integral (with the exact horizon cut) is available in closed form.
    The two regions xi1 >= xi2 and xi2 >= xi1 are integrated by tensor
    Gauss rules in the remaining three coordinates.
    """
    sh = [a for a in range(len(loc1)) if loc1[a] >= 0 and loc2[a] >= 0]
    assert len(sh) == 1
    s1, s2 = int(loc1[sh[0]]), int(loc2[sh[0]])
    P1, P2 = _patch_gradients(v1, v2, loc1, loc2)
    beta = spec.homogeneity
    # edge chains v0 -> v1 -> v2 of each element starting at the shared vertex
    o1 = [s1, (s1 + 1) % 3, (s1 + 2) % 3]
    o2 = [s2, (s2 + 1) % 3, (s2 + 2) % 3]
    w1 = v1[o1]
    w2 = v2[o2]
    J = abs(_cross2(w1[1] - w1[0], w1[2] - w1[1])) * abs(
        _cross2(w2[1] - w2[0], w2[2] - w2[1])
    )
    t, gw = gauss01(quad.transform_points + 8)
    U, V, W3 = np.meshgrid(t, t, t, indexing="ij")
    GW = (gw[:, None, None] * gw[None, :, None] * gw[None, None, :]).ravel()
    U, V, W3 = U.ravel(), V.ravel(), W3.ravel()
    p = len(loc1)
    c = spec.components
    M = np.zeros((p * c, p * c))
    for (wa, Pa), (wb, Pb) in (((w1, P1), (w2, P2)), ((w2, P2), (w1, P1))):
        # outer leg A(u) = (v1 - v0) + u (v2 - v1); inner leg scaled by v.
        Aout = (wa[1] - wa[0])[None, :] + U[:, None] * (wa[2] - wa[1])[None, :]
        Ain = (wb[1] - wb[0])[None, :] + W3[:, None] * (wb[2] - wb[1])[None, :]
        m = V[:, None] * Ain - Aout  # (y - x) / rho up to overall sign
        nrm = np.linalg.norm(m, axis=1)
        rho_max = np.minimum(1.0, spec.delta / nrm)
        radial = rho_max ** (6.0 - beta) / (6.0 - beta)
        D = V[:, None] * (Ain @ Pb.T) - Aout @ Pa.T  # (q, p)
        M += _tensor_contract(spec, GW * V * radial * J, m, D)
    return M


def common_edge_pair_matrix(
    v1: np.ndarray, v2: np.ndarray, loc1: np.ndarray, loc2: np.ndarray,
    spec: KernelSpec, quad: QuadratureConfig,
) -> np.ndarray:
    """Singular kernel, elements sharing an edge.

    With both elements parametrized from the shared edge, the integrand
    depends on the position along the edge only through the overlap
    length L(z), an affine function along rays from the singular origin
    in the relative coordinates z = (xi1 - xi2, eta1, eta2).  The region
    is split into pyramids over the far faces of the coordinate box and
    the radial integral per ray is evaluated in closed form (including
    the exact horizon cut).
    """
    sh = [a for a in range(len(loc1)) if loc1[a] >= 0 and loc2[a] >= 0]
    assert len(sh) == 2
    a0, a1 = sh[0], sh[1]
    s0_1, s1_1 = int(loc1[a0]), int(loc1[a1])
    s0_2, s1_2 = int(loc2[a0]), int(loc2[a1])
    far1 = ({0, 1, 2} - {s0_1, s1_1}).pop()
    far2 = ({0, 1, 2} - {s0_2, s1_2}).pop()
    s0 = v1[s0_1]
    s1 = v1[s1_1]
    c1 = v1[far1]
    c2 = v2[far2]
    E = s1 - s0
    d1 = c1 - s1
    d2 = c2 - s1
    J = abs(_cross2(E, d1)) * abs(_cross2(E, d2))  # (2|E1|)(2|E2|)
    beta = spec.homogeneity
    # basis differences in z = (a, eta1, eta2) for nodes (s0, s1, c1, c2)
    core = np.array(
        [
            [1.0, 0.0, 0.0],  # s0: a
            [-1.0, 1.0, -1.0],  # s1: -a + eta1 - eta2
            [0.0, -1.0, 0.0],  # c1: -eta1
            [0.0, 0.0, 1.0],  # c2: eta2
        ]
    )
    # map core rows onto patch slots
    p = len(loc1)
    B = np.zeros((p, 3))
    B[a0] = core[0]
    B[a1] = core[1]
    for a in range(p):
        if loc1[a] == far1 and loc2[a] < 0:
            B[a] = core[2]
        elif loc2[a] == far2 and loc1[a] < 0:
            B[a] = core[3]
    # composite tensor rule: the per-ray cutoffs switch branches along
    # curves in the face coordinates, so panels are needed for accuracy
    t, gw = gauss01(quad.transform_points)
    k = quad.transform_panels
    t = np.concatenate([(i + t) / k for i in range(k)])
    gw = np.tile(gw / k, k)
    faces = [
        # (p-vector builder, weight scale)
        (lambda s, r: np.column_stack([np.ones_like(s), s, r]), 1.0),   # a=1
        (lambda s, r: np.column_stack([-np.ones_like(s), s, r]), 1.0),  # a=-1
        (lambda s, r: np.column_stack([2 * s - 1, np.ones_like(s), r]), 2.0),  # eta1=1
        (lambda s, r: np.column_stack([2 * s - 1, r, np.ones_like(s)]), 2.0),  # eta2=1
    ]
    S, R = np.meshgrid(t, t, indexing="ij")
    GW = (gw[:, None] * gw[None, :]).ravel()
    S, R = S.ravel(), R.ravel()
    c = spec.components
    M = np.zeros((p * c, p * c))
    ex = 5.0 - beta
    for build, scale in faces:
        P = build(S, R)  # (q, 3) ray endpoints
        m = P[:, 0, None] * E[None, :] + P[:, 1, None] * d1[None, :] \
            - P[:, 2, None] * d2[None, :]
        nrm = np.linalg.norm(m, axis=1)
        # overlap length along the ray: L(t p) = 1 - c1l * t
        c1l = np.maximum(P[:, 0], 0.0) + np.maximum(P[:, 2], P[:, 1] - P[:, 0])
        with np.errstate(divide="ignore"):
            t_zero = np.where(c1l > 0, 1.0 / np.maximum(c1l, 1e-300), np.inf)
        tcut = np.minimum(np.minimum(1.0, spec.delta / nrm), t_zero)
        radial = tcut**ex / ex - c1l * tcut ** (ex + 1.0) / (ex + 1.0)
        D = P @ B.T  # (q, p) basis differences per unit t
        M += _tensor_contract(spec, GW * scale * radial * J, m, D)
    return M


# Reference hexagon of pairwise difference vectors of the unit triangle,
# in angular order; consecutive sectors have unit cross products.
_HEX = np.array([(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)], float)


def coinciding_pair_matrix(
    verts: np.ndarray, spec: KernelSpec, quad: QuadratureConfig
) -> np.ndarray:
    """Element paired with itself, in relative polar coordinates.

    With w = y - x the double integral collapses to an integral over the
    difference hexagon E - E weighted by |E cap (E - w)|, which has the
    closed form (2|E|) L(w)^2 / 2 in reference coordinates.  Kernel
    homogeneity turns the radial part into a Gauss-Jacobi integral of a
    quadratic polynomial, so the radial rule is exact; the horizon cut
    enters as an exact per-direction radial limit.
    """
    v = np.asarray(verts, dtype=float)
    B = np.column_stack([v[1] - v[0], v[2] - v[0]])
    detB = abs(np.linalg.det(B))
    area = 0.5 * detB
    grads = p1_gradients(v)  # (3, 2)
    beta = spec.homogeneity
    alpha = 3.0 - beta
    t_nodes, t_wts = gauss01(quad.angular_points)
    r_nodes, r_wts = gauss_jacobi01(quad.radial_points, alpha)
    c = spec.components
    M = np.zeros((3 * c, 3 * c)) if c == 2 else np.zeros((3, 3))
    for k in range(6):
        r0, r1 = _HEX[k], _HEX[(k + 1) % 6]
        mh = r0[None, :] + t_nodes[:, None] * (r1 - r0)[None, :]  # (nt, 2)
        mw = mh @ B.T  # physical directions
        # Per-direction radial cut from the horizon ball.
        if spec.ball_norm == "linf":
            nrm = np.max(np.abs(mw), axis=1)
        else:
            nrm = np.linalg.norm(mw, axis=1)
        cut = np.minimum(1.0, spec.delta / nrm)
        # Radial moment of the overlap area: int_0^cut xi^alpha L(xi)^2/2 dxi.
        xi = cut[:, None] * r_nodes[None, :]  # (nt, nr)
        wa = xi[:, :, None] * mh[:, None, :]  # (nt, nr, 2) reference offsets
        Lr = (
            1.0
            - np.maximum(0.0, wa.sum(axis=2))
            - np.maximum(0.0, -wa[:, :, 0])
            - np.maximum(0.0, -wa[:, :, 1])
        )
        Aref = 0.5 * np.maximum(Lr, 0.0) ** 2
        radial = cut ** (alpha + 1.0) * (Aref * r_wts[None, :]).sum(axis=1)
        # (2|E|) converts the reference overlap area to physical.
        Kdir = kernel_on_support(spec, mw)  # (nt,) or (nt, 2, 2)
        P = mw @ grads.T  # (nt, 3): grad(psi_a) . m
        if c == 1:
            fac = t_wts * radial * Kdir * 2.0 * area * detB
            M += np.einsum("t,ta,tb->ab", fac, P, P)
        else:
            fac = t_wts * radial * 2.0 * area * detB
            Mi = np.einsum("t,tij,ta,tb->aibj", fac, Kdir, P, P, optimize=True)
            M += Mi.reshape(6, 6)
    return M


def pair_matrix(
    mesh: Mesh, e1: int, e2: int, spec: KernelSpec, strategy: str,
    quad: QuadratureConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Local matrix of an element pair over its union patch.

    Returns (M, patch node ids); M has shape (p*c, p*c) with component-
    interleaved rows/columns for vector kernels.
    """
    ids1 = mesh.elements[e1]
    ids2 = mesh.elements[e2]
    patch, loc1, loc2 = _patch(ids1, ids2)
    v1 = mesh.vertices[ids1]
    v2 = mesh.vertices[ids2]
    n_shared = int(np.sum((loc1 >= 0) & (loc2 >= 0)))
    if e1 == e2:
        M = coinciding_pair_matrix(v1, spec, quad)
    elif spec.singular and n_shared == 2:
        M = common_edge_pair_matrix(v1, v2, loc1, loc2, spec, quad)
    elif spec.singular and n_shared == 1:
        M = common_vertex_pair_matrix(v1, v2, loc1, loc2, spec, quad)
    elif spec.singular:
        straddle = _straddles_horizon(v1, v2, spec)
        if straddle:
            cells = disk_interaction_cells(v1, v2, spec.delta,
                                           quad.arc_segments)
        else:
            cells = [v1]
        # grade composite depth per cell by its distance to the inner
        # element: the kernel varies strongly only on nearby cells
        diam = max(np.linalg.norm(v1[1] - v1[0]),
                   np.linalg.norm(v1[2] - v1[0]),
                   np.linalg.norm(v1[2] - v1[1]))
        outer = []
        for cell in cells:
            lev = _proximity_level(cell, v2, diam, quad, straddle)
            outer.extend(subdivide_triangle(cell, lev) if lev else [cell])
        deg = max(quad.outer_degree, 5) if straddle else quad.outer_degree
        M = regular_pair_matrix(v1, v2, loc1, loc2, spec, strategy, quad,
                                outer_tris=outer, outer_degree=deg)
    elif spec.ball_norm == "linf":
        # piecewise-constant kernel: splitting the outer element along the
        # clip-combinatorics lines makes the fixed-order rules exact
        cells = square_interaction_cells(v1, v2, spec.delta)
        M = regular_pair_matrix(v1, v2, loc1, loc2, spec, strategy, quad,
                                outer_tris=cells,
                                outer_degree=max(quad.outer_degree, 5))
    else:
        M = regular_pair_matrix(v1, v2, loc1, loc2, spec, strategy, quad)
    return M, patch


def _straddles_horizon(v1: np.ndarray, v2: np.ndarray,
                       spec: KernelSpec) -> bool:
    """True when some point pair of the two elements exceeds the horizon
    (by convexity the vertex pairs are enough)."""
    if spec.ball_norm == "linf":
        diffs = np.abs(v1[:, None, :] - v2[None, :, :]).max(axis=2)
    else:
        diffs = np.linalg.norm(v1[:, None, :] - v2[None, :, :], axis=2)
    return float(diffs.max()) > spec.delta


def _proximity_level(cell: np.ndarray, v2: np.ndarray, diam: float,
                     quad: QuadratureConfig, straddle: bool) -> int:
    """Composite depth for an outer cell from its distance to the inner
    element (strong kernel variation near the singular diagonal)."""
    p = closest_point_triangle(cell.mean(axis=0), v2)
    for _ in range(3):
        q = closest_point_triangle(p, cell)
        p = closest_point_triangle(q, v2)
    dist = float(np.linalg.norm(p - q))
    if dist < 1.5 * diam:
        lev = quad.cut_subdiv - 2
    elif straddle:
        lev = quad.cut_subdiv - 3
    else:
        lev = 0
    return max(lev, 0)


# Backwards-friendly spec name.
assemble_pair = pair_matrix


# ---------------------------------------------------------------------------
# Structured-mesh assembler with translation-class caching

_BARY_T = np.array([[2 / 3, 1 / 3], [1 / 3, 2 / 3]])  # lattice barycenters


class Assembler:
    """Assembles stiffness matrices on a structured mesh.

    Pair integrals are cached per translation class (cell offset and the
    two triangle types), then scattered vectorized over all anchors.
    """

    def __init__(
        self,
        mesh: Mesh,
        spec: KernelSpec,
        strategy: str | None = None,
        quad: QuadratureConfig | None = None,
    ):
        if mesh.cells_per_side == 0:
            raise ValueError("Assembler requires a structured mesh")
        self.mesh = mesh
        self.spec = spec
        self.strategy = strategy or default_strategy(spec)
        self.quad = quad or QuadratureConfig()
        self.N = mesh.cells_per_side
        self._classes: list[tuple[int, int, int, int]] | None = None
        self._cache: dict[tuple[int, int, int, int], tuple[np.ndarray, np.ndarray, int]] = {}

    # -- translation classes ------------------------------------------------

    def classes(self) -> list[tuple[int, int, int, int]]:
        """Canonical (unordered) interacting pair classes (dx, dy, t1, t2)."""
        if self._classes is not None:
            return self._classes
        mesh = self.mesh
        # Reach in cell units, measured in the norm of the interaction
        # ball: vertices sit at most 2/3 (per axis) / sqrt(5)/3 (l2) from
        # their barycenter, so pairs beyond the margin cannot touch.
        linf = self.spec.ball_norm == "linf"
        margin = 4.0 / 3.0 if linf else 2.0 * np.sqrt(5.0) / 3.0
        reach = self.spec.delta * mesh.n + margin + 1e-12
        rng = int(np.ceil(reach))
        out = []
        for dy in range(-rng, rng + 1):
            for dx in range(-rng, rng + 1):
                for t1 in range(2):
                    for t2 in range(2):
                        db = np.array([dx, dy]) + _BARY_T[t2] - _BARY_T[t1]
                        dist = np.max(np.abs(db)) if linf else np.linalg.norm(db)
                        if dist > reach:
                            continue
                        if (dy, dx) > (0, 0) or ((dx, dy) == (0, 0) and t1 <= t2):
                            out.append((dx, dy, t1, t2))
        self._classes = out
        return out

    def class_matrix(self, key: tuple[int, int, int, int]):
        """(patch matrix, patch node-id offsets, multiplicity factor)."""
        if key in self._cache:
            return self._cache[key]
        dx, dy, t1, t2 = key
        N = self.N
        ax, ay = max(0, -dx), max(0, -dy)
        e1 = 2 * (ay * N + ax) + t1
        e2 = 2 * ((ay + dy) * N + (ax + dx)) + t2
        M, patch = pair_matrix(self.mesh, e1, e2, self.spec, self.strategy,
                               self.quad)
        anchor = ay * (N + 1) + ax
        offsets = patch - anchor
        # lattice offsets of the patch nodes relative to the anchor corner
        lat_i = patch % (N + 1) - ax
        lat_j = patch // (N + 1) - ay
        factor = 1 if (dx, dy) == (0, 0) and t1 == t2 else 2
        self._cache[key] = (M, offsets, factor, lat_i, lat_j)
        return self._cache[key]

    def _anchors(self, key: tuple[int, int, int, int]) -> tuple[np.ndarray, np.ndarray]:
        """All anchor cells with the partner in bounds -> (e1, e2) arrays."""
        dx, dy, t1, t2 = key
        N = self.N
        cx = np.arange(max(0, -dx), N - max(0, dx))
        cy = np.arange(max(0, -dy), N - max(0, dy))
        CX, CY = np.meshgrid(cx, cy, indexing="xy")
        cell1 = (CY * N + CX).ravel()
        cell2 = ((CY + dy) * N + (CX + dx)).ravel()
        return 2 * cell1 + t1, 2 * cell2 + t2

    def _anchor_nodes(self, e1: np.ndarray) -> np.ndarray:
        """Anchor corner node id of each element's cell."""
        cell = e1 // 2
        cx = cell % self.N
        cy = cell // self.N
        return cy * (self.N + 1) + cx

    # -- scatter-based assembly --------------------------------------------

    def assemble(
        self,
        element_mask: np.ndarray | None = None,
        pair_weights=None,
        node_map: np.ndarray | None = None,
        n_local_nodes: int | None = None,
    ) -> sp.csr_matrix:
        """Assemble by scattering every pair (optionally masked/weighted).

        ``pair_weights(e1, e2) -> w`` scales each pair contribution (used
        for the counting-function-weighted subdomain forms).  ``node_map``
        maps global node ids to local ids for subdomain matrices.
        """
        mesh = self.mesh
        c = self.spec.components
        n_nodes = n_local_nodes if n_local_nodes is not None else mesh.n_vertices
        ndof = c * n_nodes
        rows_all, cols_all, vals_all = [], [], []
        nnz_budget = 0
        mats: list[sp.csr_matrix] = []
        for key in self.classes():
            e1, e2 = self._anchors(key)
            if element_mask is not None:
                keep = element_mask[e1] & element_mask[e2]
                if not np.any(keep):
                    continue
                e1, e2 = e1[keep], e2[keep]
            M, offsets, factor, _, _ = self.class_matrix(key)
            base = self._anchor_nodes(e1)
            nodes = base[:, None] + offsets[None, :]  # (na, p)
            if node_map is not None:
                nodes = node_map[nodes]
            if c == 1:
                dofs = nodes
            else:
                dofs = np.stack([2 * nodes, 2 * nodes + 1], axis=2).reshape(
                    len(e1), -1
                )
            pc = dofs.shape[1]
            w = factor * (pair_weights(e1, e2) if pair_weights is not None
                          else np.ones(len(e1)))
            rows = np.broadcast_to(dofs[:, :, None], (len(e1), pc, pc))
            cols = np.broadcast_to(dofs[:, None, :], (len(e1), pc, pc))
            vals = w[:, None, None] * M[None, :, :]
            rows_all.append(rows.ravel())
            cols_all.append(cols.ravel())
            vals_all.append(vals.ravel())
            nnz_budget += rows_all[-1].size
            if nnz_budget > 2_000_000:
                mats.append(self._to_csr(rows_all, cols_all, vals_all, ndof))
                rows_all, cols_all, vals_all = [], [], []
                nnz_budget = 0
        mats.append(self._to_csr(rows_all, cols_all, vals_all, ndof))
        out = mats[0]
        for m in mats[1:]:
            out = out + m
        return out

    @staticmethod
    def _to_csr(rows, cols, vals, ndof) -> sp.csr_matrix:
        if not rows:
            return sp.csr_matrix((ndof, ndof))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(ndof, ndof),
        )

    # -- stencil-based assembly (interior rows) -----------------------------

    def stencil(self) -> dict[tuple[int, int], np.ndarray]:
        """Node-offset stencil: s[(di, dj)] is the (c, c) coupling block of
        nodes m and m + (di, dj), valid whenever every contributing pair
        exists (true for all rows of unknown nodes)."""
        c = self.spec.components
        s: dict[tuple[int, int], np.ndarray] = {}
        for key in self.classes():
            M, _, factor, di, dj = self.class_matrix(key)
            p = len(di)
            Mv = M.reshape(p, c, p, c)
            for a in range(p):
                for b in range(p):
                    d = (int(di[b] - di[a]), int(dj[b] - dj[a]))
                    blk = s.setdefault(d, np.zeros((c, c)))
                    blk += factor * Mv[a, :, b, :]
        # enforce exact symmetry of the stencil
        for d in list(s):
            dm = (-d[0], -d[1])
            if dm in s:
                avg = 0.5 * (s[d] + s[dm].T)
                s[d] = avg
                s[dm] = avg.T.copy()
        return s

    def assemble_interior_rows(self) -> sp.csr_matrix:
        """Full-width matrix rows for unknown (interior) nodes via the
        stencil; collar rows are left empty.  Exact for interior rows:
        every real contributing pair exists and any assumed pair with a
        fictitious element beyond the mesh has zero kernel support."""
        mesh = self.mesh
        c = self.spec.components
        N1 = self.N + 1
        s = self.stencil()
        # node ids of interior nodes and their lattice coords
        ids = np.flatnonzero(mesh.node_region == INTERIOR)
        nix = ids % N1
        niy = ids // N1
        rows, cols, vals = [], [], []
        for (di, dj), blk in s.items():
            cix = nix + di
            ciy = niy + dj
            ok = (cix >= 0) & (cix <= self.N) & (ciy >= 0) & (ciy <= self.N)
            r = ids[ok]
            col = ciy[ok] * N1 + cix[ok]
            for i in range(c):
                for j in range(c):
                    if blk[i, j] == 0.0:
                        continue
                    rows.append(c * r + i)
                    cols.append(c * col + j)
                    vals.append(np.full(len(r), blk[i, j]))
        ndof = c * mesh.n_vertices
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(ndof, ndof),
        )

    # -- load vector --------------------------------------------------------

    def assemble_load(
        self,
        f,
        element_mask: np.ndarray | None = None,
        element_weights: np.ndarray | None = None,
        node_map: np.ndarray | None = None,
        n_local_nodes: int | None = None,
    ) -> np.ndarray:
        """Load vector ``int psi_a f`` (optionally element-masked/weighted)."""
        mesh = self.mesh
        c = self.spec.components
        n_nodes = n_local_nodes if n_local_nodes is not None else mesh.n_vertices
        els = (np.flatnonzero(element_mask) if element_mask is not None
               else np.arange(mesh.n_elements))
        bary, wts = triangle_rule(self.quad.load_degree)
        tri_verts = mesh.vertices[mesh.elements[els]]
        pts = np.einsum("qb,ebx->eqx", bary, tri_verts)
        fv = np.asarray(f(pts.reshape(-1, 2)), dtype=float)
        if c == 1 and fv.ndim == 1:
            fv = fv[:, None]
        fv = fv.reshape(len(els), len(wts), c)
        a = tri_verts[:, 1] - tri_verts[:, 0]
        b = tri_verts[:, 2] - tri_verts[:, 0]
        areas = 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        if element_weights is not None:
            areas = areas * element_weights
        # contrib[e, a_local, comp]
        contrib = np.einsum("e,q,qa,eqc->eac", areas, wts, bary, fv)
        out = np.zeros(c * n_nodes)
        nodes = mesh.elements[els]
        if node_map is not None:
            nodes = node_map[nodes]
        for i in range(c):
            np.add.at(out, c * nodes + i, contrib[:, :, i])
        return out


# ---------------------------------------------------------------------------
# Global assembled system


@dataclass
class AssembledSystem:
    """Reduced global system  A u = f - B g  over unknown dofs."""

    mesh: Mesh
    spec: KernelSpec
    A: sp.csr_matrix
    B_coupling: sp.csr_matrix
    load: np.ndarray
    g: np.ndarray
    interior_dofs: np.ndarray
    collar_dofs: np.ndarray

    @property
    def rhs(self) -> np.ndarray:
        return self.load - self.B_coupling @ self.g


def _node_dofs(nodes: np.ndarray, c: int) -> np.ndarray:
    if c == 1:
        return nodes
    return np.stack([c * nodes, c * nodes + 1], axis=1).ravel()


def assemble_global(
    mesh: Mesh,
    spec: KernelSpec,
    f,
    g,
    strategy: str | None = None,
    quad: QuadratureConfig | None = None,
    assembler: Assembler | None = None,
) -> AssembledSystem:
    """Assemble the volume-constrained global system.

    ``f`` is the forcing on the interior, ``g`` the constraint data on
    the collar; both map (m, 2) point arrays to values.
    """
    asm = assembler or Assembler(mesh, spec, strategy, quad)
    c = spec.components
    full = asm.assemble_interior_rows()
    interior_dofs = _node_dofs(mesh.interior_nodes, c)
    collar_dofs = _node_dofs(mesh.collar_nodes, c)
    A = full[interior_dofs][:, interior_dofs].tocsr()
    B = full[interior_dofs][:, collar_dofs].tocsr()
    load_full = asm.assemble_load(f)
    gv = np.asarray(g(mesh.vertices[mesh.collar_nodes]), dtype=float)
    if c == 1 and gv.ndim > 1:
        gv = gv.ravel()
    gv = gv.reshape(-1)
    return AssembledSystem(
        mesh=mesh,
        spec=spec,
        A=A,
        B_coupling=B,
        load=load_full[interior_dofs],
        g=gv,
        interior_dofs=interior_dofs,
        collar_dofs=collar_dofs,
    )
