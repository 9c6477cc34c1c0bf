"""Stiffness assembly: pair integrals, stencils, and global systems."""

import numpy as np
import pytest

from nlfeti.assembly import (Assembler, QuadratureConfig, assemble_global,
                             pair_matrix)
from nlfeti.kernels import KernelSpec, scaling_constant
from nlfeti.mesh import INTERIOR, build_structured_mesh, p1_values
from nlfeti.quadrature import map_to_physical, triangle_rule

from conftest import make_spec


def _pair_oracle(mesh, e1, e2, spec, patch, degree=4):
    """Plain tensorized Gauss double integral of the pair contribution,
    valid when the kernel has no support boundary inside the pair."""
    v1 = mesh.vertices[mesh.elements[e1]]
    v2 = mesh.vertices[mesh.elements[e2]]
    bary, w = triangle_rule(degree)
    X, WX = map_to_physical(v1, bary, w)
    Y, WY = map_to_physical(v2, bary, w)
    gamma = scaling_constant(spec)
    # basis differences psi_a(y) - psi_a(x) per patch node
    where = {int(g): a for a, g in enumerate(patch)}
    loc1 = np.array([where[int(g)] for g in mesh.elements[e1]])
    loc2 = np.array([where[int(g)] for g in mesh.elements[e2]])
    PX = np.zeros((len(X), len(patch)))
    PX[:, loc1] = p1_values(v1, X)
    PY = np.zeros((len(Y), len(patch)))
    PY[:, loc2] = p1_values(v2, Y)
    M = np.zeros((len(patch), len(patch)))
    for i, wx in enumerate(WX):
        for j, wy in enumerate(WY):
            d = PY[j] - PX[i]
            M += wx * wy * gamma * np.outer(d, d)
    return M


def test_constant_pair_matches_analytic_double_integral():
    # horizon covers both elements entirely, so the kernel is a constant
    # and a degree-4 tensor rule is exact for the quadratic integrand
    mesh = build_structured_mesh(2, 2.0)
    spec = KernelSpec("constant", 2.0)
    e1, e2 = 0, 4    # disjoint elements two cells apart in the collar
    assert len(np.intersect1d(mesh.elements[e1], mesh.elements[e2])) == 0
    M, patch = pair_matrix(mesh, e1, e2, spec, "exact_linf",
                           QuadratureConfig())
    oracle = _pair_oracle(mesh, e1, e2, spec, patch)
    assert np.allclose(M, oracle, atol=1e-14 * abs(oracle).max())


def test_coinciding_constant_pair_annihilates_constants():
    mesh = build_structured_mesh(2, 1.0)
    spec = KernelSpec("constant", 1.0)
    M, patch = pair_matrix(mesh, 5, 5, spec, "exact_linf", QuadratureConfig())
    ones = np.ones(len(patch))
    assert np.abs(M @ ones).max() < 1e-14 * abs(M).max()


def test_fractional_coinciding_pair_stable_under_order_doubling():
    mesh = build_structured_mesh(4, 0.5)
    spec = KernelSpec("fractional", 0.5, 0.4)
    quad = QuadratureConfig()
    e = 2 * (4 * 8 + 4)  # an element well inside
    M1, _ = pair_matrix(mesh, e, e, spec, "polar", quad)
    M2, _ = pair_matrix(mesh, e, e, spec, "polar", quad.refined())
    rel = np.abs(M1 - M2).max() / np.abs(M2).max()
    assert rel < 1e-6


@pytest.mark.parametrize("family", ["constant", "fractional", "peridynamic"])
def test_symmetry_and_null_space(family):
    spec = make_spec(family, 0.25)
    mesh = build_structured_mesh(8, 0.25)
    asm = Assembler(mesh, spec)
    full = asm.assemble_interior_rows()
    ids = np.flatnonzero(mesh.node_region == INTERIOR)
    c = spec.components
    dofs = np.concatenate([c * ids + i for i in range(c)])
    sym = abs(full[dofs][:, dofs] - full[dofs][:, dofs].T).max()
    assert sym <= 1e-12 * abs(full).max()
    # constants (and rigid modes) lie in the null space of the
    # unconstrained rows: row sums over all columns vanish
    rows = np.asarray(full.sum(axis=1)).ravel()
    assert np.abs(rows[dofs]).max() <= 1e-10 * abs(full).max()
    if family == "peridynamic":
        # rotation mode: (-(y - c2), x - c1) at all nodes
        xy = mesh.vertices
        rot = np.column_stack([-(xy[:, 1] - 0.5), xy[:, 0] - 0.5]).ravel()
        out = full @ rot
        assert np.abs(out[2 * ids]).max() <= 1e-10 * abs(full).max()
        assert np.abs(out[2 * ids + 1]).max() <= 1e-10 * abs(full).max()


def test_stencil_rows_match_direct_scatter():
    """The interior-row fast path and the generic scatter assembly must
    produce identical rows for unknown nodes."""
    mesh = build_structured_mesh(8, 0.25)
    for family in ("constant", "peridynamic"):
        spec = make_spec(family, 0.25)
        asm = Assembler(mesh, spec)
        fast = asm.assemble_interior_rows()
        slow = asm.assemble()
        ids = np.flatnonzero(mesh.node_region == INTERIOR)
        c = spec.components
        dofs = np.concatenate([c * ids + i for i in range(c)])
        diff = abs(fast[dofs] - slow[dofs]).max()
        assert diff <= 1e-11 * abs(slow).max()


def test_constant_kernel_self_convergence():
    """Doubling every quadrature order must leave entries unchanged to
    1e-8 relative (the max-norm ball path is exact by construction)."""
    mesh = build_structured_mesh(8, 0.25)
    spec = KernelSpec("constant", 0.25)
    A1 = Assembler(mesh, spec).assemble_interior_rows()
    A2 = Assembler(mesh, spec,
                   quad=QuadratureConfig().refined()).assemble_interior_rows()
    rel = abs(A1 - A2).max() / abs(A2).max()
    assert rel < 1e-8


@pytest.mark.slow
def test_fractional_self_convergence():
    mesh = build_structured_mesh(8, 0.25)
    spec = KernelSpec("fractional", 0.25, 0.4)
    A1 = Assembler(mesh, spec).assemble_interior_rows()
    A2 = Assembler(mesh, spec,
                   quad=QuadratureConfig().refined()).assemble_interior_rows()
    rel = abs(A1 - A2).max() / abs(A2).max()
    assert rel < 1e-5


def test_load_vector_linear_forcing():
    mesh = build_structured_mesh(4, 0.25)
    spec = KernelSpec("constant", 0.25)
    asm = Assembler(mesh, spec)
    f = lambda p: 2.0 * p[:, 0] + p[:, 1] - 0.5
    load = asm.assemble_load(f)
    # oracle: hat-function moments by degree-3 quadrature per element
    bary, w = triangle_rule(3)
    oracle = np.zeros(mesh.n_vertices)
    for e in range(mesh.n_elements):
        v = mesh.vertices[mesh.elements[e]]
        pts, wts = map_to_physical(v, bary, w)
        oracle[mesh.elements[e]] += (wts[:, None] * bary * f(pts)[:, None]
                                     ).sum(axis=0)
    assert np.allclose(load, oracle, atol=1e-15)


def test_global_system_dirichlet_correction():
    mesh = build_structured_mesh(4, 0.25)
    spec = KernelSpec("constant", 0.25)
    exact = lambda p: p[:, 0] ** 2 * p[:, 1] + p[:, 1] ** 2
    f = lambda p: -2.0 * (1.0 + p[:, 1])
    sysm = assemble_global(mesh, spec, f, exact)
    # row sums of [A | B] vanish (constants in the unconstrained null space)
    rs = np.asarray(sysm.A.sum(axis=1)).ravel() + np.asarray(
        sysm.B_coupling.sum(axis=1)).ravel()
    assert np.abs(rs).max() <= 1e-10 * abs(sysm.A).max()
    assert sysm.rhs.shape == (len(mesh.interior_nodes),)


def test_interpolant_solves_discrete_system():
    """On the structured mesh with exact max-norm-ball quadrature, the
    nodal interpolant of the cubic manufactured solution satisfies the
    discrete system to machine precision: the Galerkin solution is the
    interpolant itself."""
    spec_delta = 0.25
    exact = lambda p: p[:, 0] ** 2 * p[:, 1] + p[:, 1] ** 2
    f = lambda p: -2.0 * (1.0 + p[:, 1])
    for n in (4, 8, 16):
        mesh = build_structured_mesh(n, spec_delta)
        spec = KernelSpec("constant", spec_delta)
        sysm = assemble_global(mesh, spec, f, exact)
        ui = exact(mesh.vertices[mesh.interior_nodes])
        res = sysm.A @ ui - sysm.rhs
        assert np.linalg.norm(res) / np.linalg.norm(sysm.rhs) < 1e-11
