"""Geometric predicates and approximate ball-element intersections.

The inner integration domain of every element pair is the intersection of
the inner triangle with the horizon ball around the outer quadrature
point.  Strategies:

- ``exact_linf``: clip against the axis-aligned square (exact for the
  max-norm ball).
- ``barycenter``: keep the whole triangle iff its barycenter lies in the
  (Euclidean) ball, otherwise drop it.
- ``nocaps``: inscribed chord polygon of the triangle/disk intersection.
- ``approxcaps``: chord polygon plus one triangle per circular cap with
  apex at the arc midpoint.

For ``exact_linf``, ``nocaps`` and ``approxcaps`` the returned region is
contained in the true ball; ``barycenter`` may overshoot by design.
"""

from __future__ import annotations

import numpy as np

STRATEGIES = ("exact_linf", "polar", "barycenter", "nocaps", "approxcaps")

_EPS = 1e-14


def clip_polygon_halfplane(
    poly: np.ndarray, normal: np.ndarray, offset: float
) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon against ``n.x <= c``."""
    if len(poly) == 0:
        return poly
    d = poly @ normal - offset
    out: list[np.ndarray] = []
    m = len(poly)
    for i in range(m):
        j = (i + 1) % m
        di, dj = d[i], d[j]
        if di <= _EPS:
            out.append(poly[i])
        if (di < -_EPS and dj > _EPS) or (di > _EPS and dj < -_EPS):
            t = di / (di - dj)
            out.append(poly[i] + t * (poly[j] - poly[i]))
    if not out:
        return np.empty((0, 2))
    return np.asarray(out)


def clip_triangle_square(tri: np.ndarray, center: np.ndarray, r: float) -> np.ndarray:
    """Clip a triangle against the axis-aligned square of half-width r."""
    poly = np.asarray(tri, dtype=float)
    cx, cy = center
    for normal, offset in (
        ((1.0, 0.0), cx + r),
        ((-1.0, 0.0), -(cx - r)),
        ((0.0, 1.0), cy + r),
        ((0.0, -1.0), -(cy - r)),
    ):
        poly = clip_polygon_halfplane(poly, np.asarray(normal), offset)
        if len(poly) == 0:
            break
    return poly


def square_interaction_cells(
    tri_outer: np.ndarray, tri_inner: np.ndarray, r: float
) -> list[np.ndarray]:
    """Split the outer triangle along every line where the combinatorics
    of ``tri_inner`` clipped by the square of half-width ``r`` around the
    moving point can change.

    Those events are (a) an inner vertex crossing a square side (four
    axis-aligned lines per vertex) and (b) a square corner crossing an
    inner edge line (four parallel lines per edge).  Inside each cell of
    the resulting arrangement the clipped polygon has vertices affine in
    the outer point, so the pair integrand of a piecewise-constant kernel
    is a polynomial there and fixed-order Gauss rules are exact.
    """
    tri_inner = np.asarray(tri_inner, dtype=float)
    lines: list[tuple[np.ndarray, float]] = []
    ex = np.array([1.0, 0.0])
    ey = np.array([0.0, 1.0])
    for v in tri_inner:
        for n, coord in ((ex, v[0]), (ey, v[1])):
            lines.append((n, coord - r))
            lines.append((n, coord + r))
    for i in range(3):
        a, b = tri_inner[i], tri_inner[(i + 1) % 3]
        e = b - a
        n = np.array([-e[1], e[0]])
        nn = np.linalg.norm(n)
        if nn < 1e-30:
            continue
        n = n / nn
        c = float(n @ a)
        for s1 in (-1.0, 1.0):
            for s2 in (-1.0, 1.0):
                lines.append((n, c - r * (s1 * n[0] + s2 * n[1])))
    polys = [np.asarray(tri_outer, dtype=float)]
    for n, c in lines:
        nxt: list[np.ndarray] = []
        for poly in polys:
            for half in (clip_polygon_halfplane(poly, n, c),
                         clip_polygon_halfplane(poly, -n, -c)):
                if len(half) >= 3 and _polygon_area(half) > 1e-28:
                    nxt.append(half)
        polys = nxt
    cells: list[np.ndarray] = []
    for poly in polys:
        cells.extend(fan_triangulate(poly))
    return cells


def disk_interaction_cells(
    tri_outer: np.ndarray, tri_inner: np.ndarray, r: float,
    arc_segments: int = 4,
) -> list[np.ndarray]:
    """Split the outer triangle along the curves where the intersection
    of the Euclidean ball around the moving point with ``tri_inner``
    loses smoothness.

    Those curves are the lines at distance ``r`` from the inner edge
    lines (tangency events) and the circles of radius ``r`` around the
    inner vertices (vertex-crossing events); the circles are replaced by
    chord polylines with ``arc_segments`` pieces across the subtended
    span.  Aligning the outer composite rule with these curves restores
    fast convergence for pairs straddling the horizon.
    """
    tri_outer = np.asarray(tri_outer, dtype=float)
    tri_inner = np.asarray(tri_inner, dtype=float)
    lines: list[tuple[np.ndarray, float]] = []
    for i in range(3):
        a, b = tri_inner[i], tri_inner[(i + 1) % 3]
        e = b - a
        nn = np.linalg.norm(e)
        if nn < 1e-30:
            continue
        n = np.array([-e[1], e[0]]) / nn
        c = float(n @ a)
        lines.append((n, c - r))
        lines.append((n, c + r))
    for v in tri_inner:
        dmin = np.linalg.norm(v - closest_point_triangle(v, tri_outer))
        dmax = float(np.linalg.norm(tri_outer - v, axis=1).max())
        if not (dmin < r < dmax):
            continue
        # chord polyline across the angular span of the outer triangle
        ref = np.arctan2(*(tri_outer.mean(axis=0) - v)[::-1])
        rel = [
            (np.arctan2(*(p - v)[::-1]) - ref + np.pi) % (2 * np.pi) - np.pi
            for p in tri_outer
        ]
        th0, th1 = ref + min(rel), ref + max(rel)
        ths = np.linspace(th0, th1, arc_segments + 1)
        pts = v + r * np.column_stack([np.cos(ths), np.sin(ths)])
        for p0, p1 in zip(pts[:-1], pts[1:]):
            e = p1 - p0
            nn = np.linalg.norm(e)
            if nn < 1e-30:
                continue
            n = np.array([-e[1], e[0]]) / nn
            lines.append((n, float(n @ p0)))
    polys = [tri_outer]
    for n, c in lines:
        d = tri_outer @ n - c
        if d.min() > -1e-12 or d.max() < 1e-12:
            continue  # line misses the outer triangle
        nxt: list[np.ndarray] = []
        for poly in polys:
            for half in (clip_polygon_halfplane(poly, n, c),
                         clip_polygon_halfplane(poly, -n, -c)):
                if len(half) >= 3 and _polygon_area(half) > 1e-28:
                    nxt.append(half)
        polys = nxt
    cells: list[np.ndarray] = []
    for poly in polys:
        cells.extend(fan_triangulate(poly))
    return cells


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _segment_circle_params(
    a: np.ndarray, b: np.ndarray, center: np.ndarray, r: float
) -> list[float]:
    """Parameters t in (0,1) where segment a + t(b-a) crosses the circle."""
    d = b - a
    f = a - center
    A = d @ d
    B = 2.0 * (f @ d)
    C = f @ f - r * r
    disc = B * B - 4.0 * A * C
    if disc <= 0.0 or A == 0.0:
        return []
    sq = np.sqrt(disc)
    ts = [(-B - sq) / (2 * A), (-B + sq) / (2 * A)]
    return [t for t in ts if 1e-12 < t < 1.0 - 1e-12]


def chord_polygon_and_caps(
    tri: np.ndarray, center: np.ndarray, r: float, cap_levels: int = 0
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Chord polygon of triangle/disk intersection plus cap triangles.

    Walks the triangle boundary collecting vertices inside the disk and
    edge/circle crossings; consecutive polygon vertices that both lie on
    the circle subtend an arc inside the triangle, approximated by a cap
    triangle with apex at the arc midpoint.
    """
    tri = np.asarray(tri, dtype=float)
    center = np.asarray(center, dtype=float)
    verts: list[np.ndarray] = []
    on_circle: list[bool] = []
    inside = [np.linalg.norm(v - center) <= r for v in tri]
    if all(inside):
        return tri, []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        if inside[i]:
            verts.append(a)
            on_circle.append(False)
        for t in _segment_circle_params(a, b, center, r):
            verts.append(a + t * (b - a))
            on_circle.append(True)
    if len(verts) < 3:
        return np.empty((0, 2)), []
    poly = np.asarray(verts)
    caps: list[np.ndarray] = []
    m = len(verts)
    for i in range(m):
        j = (i + 1) % m
        if on_circle[i] and on_circle[j]:
            caps.extend(_arc_caps(poly[i], poly[j], center, r, cap_levels))
    return poly, caps


def _arc_caps(p0: np.ndarray, p1: np.ndarray, center: np.ndarray, r: float,
              levels: int) -> list[np.ndarray]:
    """Triangles filling the circular segment between chord (p0, p1) and
    its arc, by recursive bisection: the apex triangle plus the two
    sub-segments.  Leftover area shrinks by 4x per level."""
    mid = 0.5 * (p0 + p1)
    dirv = mid - center
    nrm = np.linalg.norm(dirv)
    if nrm < 1e-13 * r:
        return []  # chord through the center: ambiguous, skip
    apex = center + (r / nrm) * dirv
    cap = np.array([p0, p1, apex])
    if _area(cap) <= 1e-30:
        return []
    if levels <= 0:
        return [cap]
    return ([cap] + _arc_caps(p0, apex, center, r, levels - 1)
            + _arc_caps(apex, p1, center, r, levels - 1))


def _area(tri: np.ndarray) -> float:
    a = tri[1] - tri[0]
    b = tri[2] - tri[0]
    return 0.5 * abs(a[0] * b[1] - a[1] * b[0])


def fan_triangulate(poly: np.ndarray) -> list[np.ndarray]:
    """Split a convex polygon into triangles fanned from its first vertex."""
    tris = []
    for i in range(1, len(poly) - 1):
        t = np.asarray([poly[0], poly[i], poly[i + 1]])
        if _area(t) > 1e-30:
            tris.append(t)
    return tris


def ball_element_intersection(
    tri: np.ndarray, center: np.ndarray, r: float, strategy: str,
    cap_levels: int = 0,
) -> list[np.ndarray]:
    """Sub-triangles covering the approximate intersection of ``tri`` with
    the horizon ball around ``center``.  May be empty."""
    tri = np.asarray(tri, dtype=float)
    center = np.asarray(center, dtype=float)
    if strategy == "exact_linf":
        poly = clip_triangle_square(tri, center, r)
        return fan_triangulate(poly)
    if strategy == "barycenter":
        bary = tri.mean(axis=0)
        if np.linalg.norm(bary - center) <= r:
            return [tri]
        return []
    if strategy in ("nocaps", "approxcaps"):
        poly, caps = chord_polygon_and_caps(tri, center, r, cap_levels)
        tris = fan_triangulate(poly)
        if strategy == "approxcaps":
            tris.extend(caps)
        return tris
    raise ValueError(f"unknown ball strategy {strategy!r}")


def closest_point_triangle(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Closest point of a triangle to ``p``."""
    a, b, c = np.asarray(tri, dtype=float)
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        return a + (d1 / (d1 - d3)) * ab
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        return a + (d2 / (d2 - d6)) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b)
    denom = 1.0 / (va + vb + vc)
    return a + ab * (vb * denom) + ac * (vc * denom)


def elements_interact(
    b1: np.ndarray, b2: np.ndarray, delta: float, h_pair: float
) -> bool:
    """Conservative interaction predicate on element barycenters.

    True whenever the supports could overlap: barycenter distance at most
    ``delta + h_pair`` with ``h_pair`` the larger element diameter.  Never
    produces false negatives for either ball norm.
    """
    return float(np.linalg.norm(np.asarray(b2) - np.asarray(b1))) <= delta + h_pair
