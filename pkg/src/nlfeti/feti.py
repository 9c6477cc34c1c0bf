"""One-level FETI solver for the volume-constrained nonlocal systems.

Each subdomain of an overlapping subdivision assembles its own weighted
stiffness blocks, eliminates interior unknowns through a Schur
complement, and couples to its neighbors only through signed interface
constraints.  The dual problem in the Lagrange multipliers is solved by
projected preconditioned conjugate gradients with a coarse problem
built from the rigid modes of the floating subdomains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import Assembler, QuadratureConfig, _node_dofs
from .kernels import KernelSpec
from .mesh import Mesh
from .sparse_linalg import (Factorization, SingularMatrixError, dense_spd_solve,
                            factorize, projected_pcg)
from .subdivision import (ConstraintSet, CountingFunction, Subdivision,
                          SubdivisionError, build_constraints, build_counting)


class ConsistencyError(RuntimeError):
    """Interface copies of the gathered solution disagree."""


# ---------------------------------------------------------------------------
# Subdomain systems


@dataclass
class SubdomainSystem:
    """Weighted stiffness blocks and factorizations of one subdomain.

    Dof layout is [inner nodes | interface nodes] (each sorted by global
    id, interleaved components for vector problems); constrained collar
    values are already moved to the right-hand side.
    """

    k: int
    components: int
    inner_nodes: np.ndarray
    interface_nodes: np.ndarray
    constrained_nodes: np.ndarray
    A_OO: sp.csr_matrix
    A_OG: sp.csr_matrix
    A_GG: sp.csr_matrix
    f_O: np.ndarray
    f_G: np.ndarray
    g: np.ndarray
    floating: bool
    modes: np.ndarray  # orthonormal rigid modes over (O, G) dofs; (n, m)
    _fact_OO: Factorization | None = field(default=None, repr=False)
    _fact_neumann: Factorization | None = field(default=None, repr=False)
    _pinned: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_O(self) -> int:
        return self.components * len(self.inner_nodes)

    @property
    def n_G(self) -> int:
        return self.components * len(self.interface_nodes)

    def fact_OO(self) -> Factorization | None:
        if self.n_O == 0:
            return None
        if self._fact_OO is None:
            self._fact_OO = factorize(self.A_OO)
        return self._fact_OO

    def full_matrix(self) -> sp.csr_matrix:
        return sp.bmat([[self.A_OO, self.A_OG],
                        [self.A_OG.T, self.A_GG]], format="csr")

    def _pin_dofs(self) -> np.ndarray:
        """Dofs pinned for the floating Neumann solve: walked in global
        dof order, greedily keeping those that make the pinned
        rigid-mode block nonsingular."""
        nmodes = self.modes.shape[1]
        # global dof order over [O | G] local layout
        nodes = np.concatenate([self.inner_nodes, self.interface_nodes])
        order = np.argsort(nodes, kind="stable")
        pins: list[int] = []
        for pos in order:
            for comp in range(self.components):
                dof = self.components * pos + comp
                trial = pins + [dof]
                blk = self.modes[trial, :]
                if np.linalg.matrix_rank(blk, tol=1e-10) == len(trial):
                    pins.append(dof)
                if len(pins) == nmodes:
                    return np.array(pins)
        raise SingularMatrixError(
            f"could not pin {nmodes} dofs on subdomain {self.k}"
        )

    def fact_neumann(self) -> Factorization:
        if self._fact_neumann is None:
            A = self.full_matrix().tolil()
            if self.floating:
                self._pinned = self._pin_dofs()
                for dof in self._pinned:
                    A[dof, :] = 0.0
                    A[:, dof] = 0.0
                    A[dof, dof] = 1.0
            self._fact_neumann = factorize(A.tocsr())
        return self._fact_neumann

    # -- operators ---------------------------------------------------------

    def schur_apply(self, v: np.ndarray) -> np.ndarray:
        """S v = A_GG v - A_OG^T solve(A_OO, A_OG v)."""
        out = self.A_GG @ v
        if self.n_O:
            out = out - self.A_OG.T @ self.fact_OO().solve(self.A_OG @ v)
        return out

    def schur_rhs(self) -> np.ndarray:
        """Condensed interface load f_G - A_OG^T A_OO^{-1} f_O."""
        out = self.f_G.copy()
        if self.n_O:
            out -= self.A_OG.T @ self.fact_OO().solve(self.f_O)
        return out

    def schur_pinv_apply(self, v: np.ndarray) -> np.ndarray:
        """Pseudoinverse of the Schur complement applied to v.

        Solves the full (possibly point-constrained) subdomain system
        with v as interface load; for floating subdomains the rigid-mode
        component is removed afterwards, giving the minimum-norm
        solution on the interface.
        """
        rhs = np.concatenate([np.zeros(self.n_O), v])
        fact = self.fact_neumann()
        if self.floating:
            rhs = rhs.copy()
            rhs[self._pinned] = 0.0
        w = fact.solve(rhs)
        if self.floating:
            w = w - self.modes @ (self.modes.T @ w)
        return w[self.n_O:]

    def backward_substitute(self, u_G: np.ndarray,
                            lam_term: np.ndarray | None = None) -> np.ndarray:
        """Interior unknowns from the interface trace."""
        if self.n_O == 0:
            return np.zeros(0)
        rhs = self.f_O - self.A_OG @ u_G
        if lam_term is not None:
            rhs = rhs - lam_term
        return self.fact_OO().solve(rhs)


def assemble_subdomain(
    mesh: Mesh,
    sub: Subdivision,
    k: int,
    spec: KernelSpec,
    f,
    g,
    strategy: str | None = None,
    quad: QuadratureConfig | None = None,
    assembler: Assembler | None = None,
    counting: CountingFunction | None = None,
) -> SubdomainSystem:
    """Assemble the multiplicity-weighted system of subdomain k.

    Every element pair is weighted by the reciprocal of the number of
    subdomains containing both elements, and the load by the reciprocal
    element multiplicity, so subdomain energies sum exactly to the
    global energy.  Raises SubdivisionError when an interacting pair has
    zero multiplicity (coverage violation).
    """
    asm = assembler or Assembler(mesh, spec, strategy, quad)
    cf = counting or build_counting(mesh, sub)
    c = spec.components

    inner = sub.inner_nodes[k]
    inter = sub.interface_nodes[k]
    constrained = sub.constrained_nodes[k]
    local_nodes = np.concatenate([inner, inter, constrained])
    node_map = np.full(mesh.n_vertices, -1, dtype=np.int64)
    node_map[local_nodes] = np.arange(len(local_nodes))

    mask = np.zeros(mesh.n_elements, dtype=bool)
    mask[sub.extended_elements[k]] = True
    mask[sub.collar_elements[k]] = True

    def weights(e1, e2):
        z = cf.element(e1, e2)
        if np.any(z == 0):
            bad = int(np.flatnonzero(z == 0)[0])
            raise SubdivisionError(
                f"element pair ({int(e1[bad])}, {int(e2[bad])}) assembled "
                "with zero multiplicity"
            )
        return 1.0 / z

    A = asm.assemble(element_mask=mask, pair_weights=weights,
                     node_map=node_map, n_local_nodes=len(local_nodes))
    interior_mask = mask.copy()
    interior_mask[sub.collar_elements[k]] = False
    els = np.flatnonzero(interior_mask)
    load = asm.assemble_load(
        f, element_mask=interior_mask,
        element_weights=1.0 / cf.elem_diag[els],
        node_map=node_map, n_local_nodes=len(local_nodes),
    )

    nO, nG = c * len(inner), c * len(inter)
    O = np.arange(nO)
    G = np.arange(nO, nO + nG)
    Cdofs = np.arange(nO + nG, c * len(local_nodes))
    gv = np.asarray(g(mesh.vertices[constrained]), dtype=float).reshape(-1)

    A_OO = A[O][:, O].tocsr()
    A_OG = A[O][:, G].tocsr()
    A_GG = A[G][:, G].tocsr()
    lift_O = A[O][:, Cdofs] @ gv
    lift_G = A[G][:, Cdofs] @ gv

    floating = bool(sub.floating[k])
    modes = _rigid_modes_full(mesh, inner, inter, c) if floating else np.zeros(
        (nO + nG, 0))
    return SubdomainSystem(
        k=k, components=c,
        inner_nodes=inner, interface_nodes=inter,
        constrained_nodes=constrained,
        A_OO=A_OO, A_OG=A_OG, A_GG=A_GG,
        f_O=load[O] - lift_O, f_G=load[G] - lift_G, g=gv,
        floating=floating, modes=modes,
    )


def _rigid_modes_full(mesh: Mesh, inner: np.ndarray, inter: np.ndarray,
                      c: int) -> np.ndarray:
    """Orthonormal rigid modes over the [inner | interface] dof layout."""
    nodes = np.concatenate([inner, inter])
    xy = mesh.vertices[nodes]
    if c == 1:
        block = np.ones((len(nodes), 1))
    else:
        ctr = xy.mean(axis=0)
        t1 = np.zeros((len(nodes), 2)); t1[:, 0] = 1.0
        t2 = np.zeros((len(nodes), 2)); t2[:, 1] = 1.0
        rot = np.column_stack([-(xy[:, 1] - ctr[1]), xy[:, 0] - ctr[0]])
        block = np.stack([t1, t2, rot], axis=2).reshape(len(nodes) * 2, 3)
    q, _ = np.linalg.qr(block)
    return q


# ---------------------------------------------------------------------------
# The assembled FETI system


@dataclass
class FetiSystem:
    """All state of a one-level FETI solve."""

    mesh: Mesh
    spec: KernelSpec
    sub: Subdivision
    constraints: ConstraintSet
    subsystems: list[SubdomainSystem]
    G: np.ndarray            # dense (M_C, n_modes); small
    GtG: np.ndarray
    f_schur: np.ndarray      # concatenated condensed interface loads
    d: np.ndarray
    e: np.ndarray
    tol: float = 1e-10
    maxit: int = 10_000
    preconditioner: str = "dirichlet"
    reortho: bool = False

    # -- block operators over concatenated interface dofs -------------------

    def _split(self, v: np.ndarray) -> list[np.ndarray]:
        off = self.constraints.offsets
        return [v[off[k]:off[k + 1]] for k in range(len(self.subsystems))]

    def schur_apply(self, v: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [s.schur_apply(vk) for s, vk in zip(self.subsystems,
                                                self._split(v))]
        ) if v.size else v

    def schur_pinv_apply(self, v: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [s.schur_pinv_apply(vk) for s, vk in zip(self.subsystems,
                                                     self._split(v))]
        ) if v.size else v

    def apply_F(self, lam: np.ndarray) -> np.ndarray:
        B = self.constraints.B
        return B @ self.schur_pinv_apply(B.T @ lam)

    def apply_P(self, lam: np.ndarray) -> np.ndarray:
        if self.G.shape[1] == 0:
            return lam
        return lam - self.G @ dense_spd_solve(self.GtG, self.G.T @ lam)

    def apply_Minv(self, r: np.ndarray) -> np.ndarray:
        if self.preconditioner == "none":
            return r
        BD = self.constraints.B_D
        return BD @ self.schur_apply(BD.T @ r)


def build_feti_system(
    mesh: Mesh,
    sub: Subdivision,
    spec: KernelSpec,
    f,
    g,
    strategy: str | None = None,
    quad: QuadratureConfig | None = None,
    tol: float = 1e-10,
    maxit: int = 10_000,
    preconditioner: str = "dirichlet",
    reortho: bool = False,
    assembler: Assembler | None = None,
) -> FetiSystem:
    """Assemble all subdomain systems and the coarse problem."""
    asm = assembler or Assembler(mesh, spec, strategy, quad)
    cf = build_counting(mesh, sub)
    cs = build_constraints(mesh, sub, spec.components)
    subs = [
        assemble_subdomain(mesh, sub, k, spec, f, g, assembler=asm,
                           counting=cf)
        for k in range(sub.K)
    ]
    f_schur = np.concatenate([s.schur_rhs() for s in subs]) if subs else np.zeros(0)
    Z = cs.Z
    G = np.asarray((cs.B @ Z).todense()) if Z.shape[1] else np.zeros(
        (cs.B.shape[0], 0))
    GtG = G.T @ G
    if Z.shape[1] and np.linalg.matrix_rank(GtG) < Z.shape[1]:
        raise SubdivisionError("coarse matrix G^T G is singular")
    e = Z.T @ f_schur if Z.shape[1] else np.zeros(0)
    system = FetiSystem(
        mesh=mesh, spec=spec, sub=sub, constraints=cs, subsystems=subs,
        G=G, GtG=GtG, f_schur=f_schur, d=np.zeros(cs.B.shape[0]),
        e=np.asarray(e).ravel(), tol=tol, maxit=maxit,
        preconditioner=preconditioner, reortho=reortho,
    )
    system.d = cs.B @ system.schur_pinv_apply(f_schur)
    return system


@dataclass
class FetiResult:
    lam: np.ndarray
    alpha: np.ndarray
    u_interface: list[np.ndarray]
    u_inner: list[np.ndarray]
    iterations: int
    trace: list[float]


def feti_solve(system: FetiSystem) -> FetiResult:
    """Run the projected-PCG dual iteration and recover all unknowns."""
    cs = system.constraints
    M_C = cs.B.shape[0]
    nm = system.G.shape[1]
    if nm:
        lam0 = system.G @ dense_spd_solve(system.GtG, system.e)
    else:
        lam0 = np.zeros(M_C)

    def check(lam):
        if nm:
            res = np.linalg.norm(system.G.T @ lam - system.e)
            if res > 1e-10 * max(1.0, np.linalg.norm(system.e)):
                raise SubdivisionError(
                    f"initial multiplier violates the coarse constraint "
                    f"(residual {res:.3e})")

    trace: list[float] = []
    if M_C == 0:
        lam, iters = np.zeros(0), 0
    else:
        lam, iters = projected_pcg(
            system.apply_F, system.apply_P, system.d, lam0,
            apply_Minv=system.apply_Minv, tol=system.tol,
            maxit=system.maxit, constraint_check=check,
            reortho=system.reortho, trace=trace,
        )

    resid = system.d - system.apply_F(lam) if M_C else np.zeros(0)
    alpha = (dense_spd_solve(system.GtG, system.G.T @ resid)
             if nm else np.zeros(0))
    u_G_all = system.schur_pinv_apply(system.f_schur - cs.B.T @ lam)
    if nm:
        u_G_all = u_G_all - np.asarray((cs.Z @ alpha)).ravel()
    u_G = system._split(u_G_all)
    u_O = [s.backward_substitute(u_G[k])
           for k, s in enumerate(system.subsystems)]
    return FetiResult(lam=lam, alpha=alpha, u_interface=u_G, u_inner=u_O,
                      iterations=iters, trace=trace)


def gather_solution(system: FetiSystem, result: FetiResult,
                    tol: float = 1e-7) -> np.ndarray:
    """Merge subdomain solutions into one global nodal coefficient
    vector (unknowns and constrained values).

    Interface copies must agree to ``tol`` relative; the copy of the
    lowest-index subdomain wins.  Raises ConsistencyError otherwise.
    """
    mesh = system.mesh
    c = system.spec.components
    out = np.full(c * mesh.n_vertices, np.nan)
    scale = max(
        max((np.abs(u).max() for u in result.u_interface if u.size),
            default=0.0),
        max((np.abs(u).max() for u in result.u_inner if u.size), default=0.0),
        1e-30,
    )
    for k in reversed(range(len(system.subsystems))):
        s = system.subsystems[k]
        for nodes, vals in ((s.inner_nodes, result.u_inner[k]),
                            (s.interface_nodes, result.u_interface[k])):
            dofs = _node_dofs(nodes, c)
            prev = out[dofs]
            seen = ~np.isnan(prev)
            if np.any(seen):
                diff = np.abs(prev[seen] - vals[seen]) / scale
                if diff.max() > tol:
                    bad = dofs[seen][int(np.argmax(diff))]
                    raise ConsistencyError(
                        f"interface copies disagree at dof {int(bad)} "
                        f"(relative difference {diff.max():.3e})")
            out[dofs] = vals
        out[_node_dofs(s.constrained_nodes, c)] = s.g
    return out
