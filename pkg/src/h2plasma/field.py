"""Boundary value problems for the electrostatic potential and the electric
field at particle positions.

The potential splits into a harmonic part, represented through its boundary
traces, the Newton potential of the particles, and optionally the potential
``phi_b = -|x|^2 / (6 beta)`` of a neutralising uniform background.  The
field at a point is

    E = -grad(SL t - DL phi) + E_particles + x / (3 beta)

where the single and double layer gradients are evaluated with the
edge-midpoint rule and H2 summation.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import constants as C

from .bemops import (GalerkinMatrices, ParticleBoundaryCoupling, assemble_N0, assemble_N1,
                     edge_midpoint_rule, newton_potential_direct)
from .cluster import build_cluster_tree
from .h2 import ClusterBasis, H2Config, H2Matrix, LaplaceGradientKernel, dense_kernel_matrix
from .mesh import BoundaryCondition
from .solvers import LinearSolver, SolverError

log = logging.getLogger(__name__)

__all__ = [
    "NondimensionalParameters",
    "TraceSolution",
    "FieldReport",
    "SolverConfig",
    "solve_dirichlet",
    "solve_neumann",
    "solve_mixed",
    "evaluate_total_field",
    "evaluate_field_at",
    "background_field",
    "background_potential",
    "newton_flux",
    "FieldSolver",
    "image_charge_field",
]

FOUR_PI = 4.0 * math.pi


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NondimensionalParameters:
    """Characteristic scales of an electron plasma.

    ``beta = (lambda_D / L0)^2`` with the Debye length
    ``lambda_D = sqrt(eps0 kT0 / (n0 e^2))``.  Velocities are measured in
    ``v0 = sqrt(kT0 / m_e)`` and times in ``t0 = L0 / v0``.
    """

    L0: float = 0.1
    n0: float = 1e12
    kT0_eV: float = 1.0
    beta: float = None

    def __post_init__(self):
        if min(self.L0, self.n0, self.kT0_eV) <= 0:
            raise ValueError("L0, n0 and kT0 must be positive")
        if self.beta is None:
            object.__setattr__(self, "beta", self.computed_beta)
        elif not math.isclose(self.beta, self.computed_beta, rel_tol=1e-12):
            raise ValueError(f"beta={self.beta} inconsistent with L0, n0, kT0 "
                             f"(expected {self.computed_beta})")

    @classmethod
    def unit(cls):
        """Parameters with beta = 1 (n0 chosen accordingly)."""
        probe = cls()
        return cls(L0=probe.L0, n0=probe.n0 * probe.beta, kT0_eV=probe.kT0_eV)

    @property
    def kT0_J(self):
        return self.kT0_eV * C.e

    @property
    def debye_length(self):
        return math.sqrt(C.epsilon_0 * self.kT0_J / (self.n0 * C.e**2))

    @property
    def computed_beta(self):
        return (self.debye_length / self.L0) ** 2

    @property
    def v0(self):
        return math.sqrt(self.kT0_J / C.m_e)

    @property
    def t0(self):
        return self.L0 / self.v0

    def scaled_density(self, factor):
        return NondimensionalParameters(self.L0, self.n0 * factor, self.kT0_eV)

    def plasma_frequency(self, factor=1.0):
        """Angular plasma frequency sqrt(n e^2 / (eps0 m_e)) in 1/s."""
        return math.sqrt(factor * self.n0 * C.e**2 / (C.epsilon_0 * C.m_e))

    def magnetic_field(self, tesla):
        """Nondimensional B for electrons: e B t0 / m_e (cyclotron frequency times t0)."""
        return np.asarray(tesla, dtype=np.float64) * C.e * self.t0 / C.m_e

    def as_dict(self):
        return {"L0": self.L0, "n0": self.n0, "kT0_eV": self.kT0_eV, "beta": self.beta,
                "t0": self.t0, "v0": self.v0, "debye_length": self.debye_length}


def background_potential(x, beta):
    x = np.atleast_2d(x)
    return -np.einsum("ij,ij->i", x, x) / (6.0 * beta)


def background_field(x, beta):
    """``-grad phi_b = x / (3 beta)``."""
    return np.asarray(x, dtype=np.float64) / (3.0 * beta)


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

@dataclass
class TraceSolution:
    """Dirichlet (nodal) and Neumann (per triangle) trace coefficients.

    ``includes_newton`` tells whether the traces belong to the full
    potential including the particles' Newton potential (mixed and Neumann
    paths) or only to its harmonic part (Dirichlet decomposition path).
    """

    phi: np.ndarray
    t: np.ndarray
    kind: str
    includes_newton: bool
    triangle_order: np.ndarray = None  # Dirichlet triangles first
    node_order: np.ndarray = None  # non-Dirichlet nodes first
    n_dirichlet_triangles: int = 0
    n_neumann_nodes: int = 0
    stats: dict = dc_field(default_factory=dict)

    @property
    def n_vertices(self):
        return len(self.phi)

    @property
    def n_triangles(self):
        return len(self.t)


@dataclass
class FieldReport:
    E: np.ndarray
    parts: dict
    unreliable: np.ndarray = None
    timings: dict = dc_field(default_factory=dict)

    def check_decomposition(self):
        total = sum(self.parts.values())
        return float(np.abs(total - self.E).max()) if len(self.E) else 0.0


@dataclass(frozen=True)
class SolverConfig:
    """Solver choice per system: dense factorisation, cg or gmres."""

    single_layer: str = "dense"
    mixed: str = "gmres"
    neumann: str = "dense"
    preconditioner: str = "jacobi"
    alpha: float = None  # Neumann stabilisation, default 1/|Gamma|


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _positions_and_charges(particles):
    if particles is None:
        return np.zeros((0, 3)), np.zeros(0)
    if isinstance(particles, tuple):
        x, wq = particles
    else:
        x, wq = particles.x, particles.wq
    return np.asarray(x, dtype=np.float64).reshape(-1, 3), np.asarray(wq, dtype=np.float64)


def _nodal_data(bc, mesh, beta, background):
    if isinstance(bc, BoundaryCondition):
        g = bc.dirichlet_nodal(mesh)
    else:
        g = np.broadcast_to(np.asarray(bc, dtype=np.float64), (mesh.n_vertices,)).copy()
    if background:
        g = g - background_potential(mesh.vertices, beta)
    return g


def _neumann_data(bc, mesh, beta, background):
    if isinstance(bc, BoundaryCondition):
        g = bc.neumann_centroid(mesh)
    else:
        g = np.broadcast_to(np.asarray(bc, dtype=np.float64), (mesh.n_triangles,)).copy()
    if background:
        # g - n . grad phi_b with grad phi_b = -x / (3 beta)
        g = g + np.einsum("ij,ij->i", mesh.normals, mesh.centroids) / (3.0 * beta)
    return g


def _vertex_potential(mesh, x, wq, beta, h2, coupling=None):
    if len(wq) == 0:
        return np.zeros(mesh.n_vertices)
    if coupling is not None:
        return coupling.potential_at_boundary(wq)
    if len(x) * mesh.n_vertices <= 4_000_000:
        return newton_potential_direct(mesh.vertices, x, wq, beta, h2.delta)
    basis = ClusterBasis(build_cluster_tree(mesh.vertices, h2.leaf_cap), h2.order)
    cpl = ParticleBoundaryCoupling(basis, beta, h2.delta, h2.order, h2.leaf_cap, h2.admissibility)
    return cpl.rebuild(x).potential_at_boundary(wq)


# --------------------------------------------------------------------------
# boundary value problems
# --------------------------------------------------------------------------

def solve_dirichlet(mats, mesh, g_D, particles=None, params=None, h2=H2Config(),
                    background=False, coupling=None, solver=None, phi_p=None):
    """Pure Dirichlet problem through the decomposition phi = phi_0 + phi_p.

    ``phi_0`` has nodal boundary values ``g_D - phi_p`` (minus ``phi_b`` with
    a background) and its Neumann trace solves ``V t0 = (M/2 + K) phi_0``.

    Parameters
    ----------
    g_D : BoundaryCondition, scalar or (n_vertices,) array
    particles : Particles or (positions, wq) tuple, optional
    coupling : ParticleBoundaryCoupling over the mesh vertices, optional
        Rebuilt for the current particles by the caller.
    solver : LinearSolver for V, optional (cached factorisation)
    phi_p : (n_vertices,) array, optional
        Precomputed Newton potential at the vertices; overrides ``particles``.
    """
    beta = (params or NondimensionalParameters.unit()).beta
    if phi_p is None:
        x, wq = _positions_and_charges(particles)
        phi_p = _vertex_potential(mesh, x, wq, beta, h2, coupling)
    phi0 = _nodal_data(g_D, mesh, beta, background) - phi_p
    rhs = mats.double_layer_rhs(phi0)
    if solver is None:
        t0 = mats.solve_V(rhs)
        stats = {"kind": "dense", "iterations": 1}
    else:
        t0 = solver.solve(rhs)
        stats = solver.last.as_dict()
    res = np.linalg.norm(mats.V_dense() @ t0 - rhs) / max(np.linalg.norm(rhs), 1e-300)
    stats["residual"] = float(res)
    if res > 1e-6:
        raise SolverError(f"single layer solve failed, relative residual {res:.3e}")
    return TraceSolution(phi=phi0, t=t0, kind="dirichlet", includes_newton=False,
                         triangle_order=np.arange(mesh.n_triangles),
                         node_order=np.arange(mesh.n_vertices),
                         n_dirichlet_triangles=mesh.n_triangles, n_neumann_nodes=0, stats=stats)


def _compatibility_defect(mesh, t, wq, beta, background, includes_particles=True):
    # total flux must equal -(1/beta) * charge enclosed (+ background volume)
    flux = float(np.dot(t, mesh.areas))
    charge = float(np.sum(wq)) if includes_particles else 0.0
    expected = -charge / beta
    if background:
        expected += mesh.volume / beta
    scale = max(abs(expected), abs(flux), 1e-300) if (charge or background) else max(mesh.total_area, 1.0)
    return (flux - expected) / scale


def solve_neumann(mats, mesh, g_N, particles=None, params=None, alpha=None, h2=H2Config(),
                  background=False, coupling=None, N0=None, tol=1e-2):
    """Pure Neumann problem with the stabilised hypersingular system.

    ``(D + alpha d d^T) phi = (M^T/2 - K^T) t - N1`` with
    ``alpha = 1/|Gamma|`` by default.  The potential is returned with zero
    mean; a warning reports incompatible data.
    """
    beta = (params or NondimensionalParameters.unit()).beta
    x, wq = _positions_and_charges(particles)
    t = _neumann_data(g_N, mesh, beta, background)
    defect = _compatibility_defect(mesh, t, wq, beta, background)
    if abs(defect) > tol:
        warnings.warn(f"Neumann data incompatible: relative flux defect {defect:.3e}",
                      RuntimeWarning, stacklevel=2)
    if N0 is None:
        N0 = _newton_N0(mesh, x, wq, beta, h2, coupling)
    N1 = assemble_N1(mats, N0)
    d = mats.d
    alpha = 1.0 / mesh.total_area if alpha is None else float(alpha)
    Dt = mats.D + alpha * np.outer(d, d)
    rhs = 0.5 * (mats.M.T @ t) - mats.K_dense().T @ t - N1
    phi = LinearSolver(Dt, "dense", spd=True).solve(rhs)
    phi -= np.dot(d, phi) / d.sum()
    return TraceSolution(phi=phi, t=t, kind="neumann", includes_newton=True,
                         triangle_order=np.arange(mesh.n_triangles),
                         node_order=np.arange(mesh.n_vertices), n_dirichlet_triangles=0,
                         n_neumann_nodes=mesh.n_vertices,
                         stats={"alpha": alpha, "flux_defect": defect})


def _newton_N0(mesh, x, wq, beta, h2, coupling=None):
    if len(wq) == 0:
        return np.zeros(mesh.n_triangles)
    direct = coupling is None and len(x) * len(mesh.edges) <= 4_000_000
    return assemble_N0(mesh, x, wq, beta, h2.delta, coupling=coupling, order=h2.order,
                       leaf_cap=h2.leaf_cap, direct=direct)


def mixed_partition(mesh, bc):
    """Orderings for the block system: Dirichlet triangles and non-Dirichlet nodes first."""
    dmask = bc.dirichlet_mask(mesh)
    tri_D = np.nonzero(dmask)[0]
    tri_N = np.nonzero(~dmask)[0]
    dnode = np.zeros(mesh.n_vertices, dtype=bool)
    dnode[mesh.triangles[tri_D].ravel()] = True
    node_N = np.nonzero(~dnode)[0]
    node_D = np.nonzero(dnode)[0]
    return tri_D, tri_N, node_N, node_D


class MixedSystem:
    """Block matrix of the mixed problem for a fixed mesh and partition."""

    def __init__(self, mats, mesh, bc, solver="gmres", preconditioner="jacobi"):
        self.mats = mats
        self.mesh = mesh
        self.tri_D, self.tri_N, self.node_N, self.node_D = mixed_partition(mesh, bc)
        V, K, D = mats.V_dense(), mats.K_dense(), mats.D
        M = mats.M.toarray()
        tD, tN, nN, nD = self.tri_D, self.tri_N, self.node_N, self.node_D
        self.V_DD = V[np.ix_(tD, tD)]
        self.V_DN = V[np.ix_(tD, tN)]
        self.K_DN = K[np.ix_(tD, nN)]
        self.K_DD = K[np.ix_(tD, nD)]
        self.K_NN = K[np.ix_(tN, nN)]
        self.M_DD = M[np.ix_(tD, nD)]
        self.M_NN = M[np.ix_(tN, nN)]
        self.D_NN = D[np.ix_(nN, nN)]
        self.D_ND = D[np.ix_(nN, nD)]
        A = np.block([[self.V_DD, -self.K_DN], [self.K_DN.T, self.D_NN]])
        self.A = A
        self.solver = LinearSolver(A, solver, preconditioner)

    def solve(self, phi_D, t_N, N0, N1):
        tD, tN, nN, nD = self.tri_D, self.tri_N, self.node_N, self.node_D
        r1 = (0.5 * self.M_DD + self.K_DD) @ phi_D - self.V_DN @ t_N - N0[tD]
        r2 = -self.D_ND @ phi_D + (0.5 * self.M_NN - self.K_NN).T @ t_N - N1[nN]
        sol = self.solver.solve(np.concatenate([r1, r2]))
        t = np.empty(self.mesh.n_triangles)
        phi = np.empty(self.mesh.n_vertices)
        t[tD] = sol[:len(tD)]
        t[tN] = t_N
        phi[nN] = sol[len(tD):]
        phi[nD] = phi_D
        return phi, t


def solve_mixed(mats, mesh, bc, particles=None, params=None, h2=H2Config(), background=False,
                coupling=None, system=None, N0=None, solver="gmres"):
    """Mixed Dirichlet/Neumann problem through the 2x2 block system.

    Traces returned are those of the full potential (Newton potential of the
    particles included).  An empty Dirichlet part is redirected to
    :func:`solve_neumann` and an empty Neumann part to :func:`solve_dirichlet`.
    """
    if not isinstance(bc, BoundaryCondition):
        raise TypeError("solve_mixed needs a BoundaryCondition table")
    bc.check(mesh, allow_pure_neumann=True)
    if bc.is_pure_dirichlet(mesh):
        log.info("no Neumann region: solving the pure Dirichlet problem")
        return solve_dirichlet(mats, mesh, bc, particles, params, h2=h2, background=background)
    if bc.is_pure_neumann(mesh):
        log.info("no Dirichlet region: solving the stabilised Neumann problem")
        return solve_neumann(mats, mesh, bc, particles, params, h2=h2, background=background,
                             coupling=coupling, N0=N0)
    beta = (params or NondimensionalParameters.unit()).beta
    x, wq = _positions_and_charges(particles)
    if system is None:
        system = MixedSystem(mats, mesh, bc, solver)
    g_D = _nodal_data(bc, mesh, beta, background)
    g_N = _neumann_data(bc, mesh, beta, background)
    if N0 is None:
        N0 = _newton_N0(mesh, x, wq, beta, h2, coupling)
    N1 = assemble_N1(mats, N0) if len(system.node_N) else np.zeros(mesh.n_vertices)
    phi, t = system.solve(g_D[system.node_D], g_N[system.tri_N], N0, N1)
    stats = system.solver.last.as_dict() if system.solver.last else {}
    return TraceSolution(phi=phi, t=t, kind="mixed", includes_newton=True,
                         triangle_order=np.concatenate([system.tri_D, system.tri_N]),
                         node_order=np.concatenate([system.node_N, system.node_D]),
                         n_dirichlet_triangles=len(system.tri_D),
                         n_neumann_nodes=len(system.node_N), stats=stats)


# --------------------------------------------------------------------------
# fields
# --------------------------------------------------------------------------

def boundary_moments(mesh, traces, subtract_mean=True):
    """Charges c and dipoles b at the edge midpoints for the layer gradients.

    The double layer of a constant has zero gradient inside, so the mean of
    phi is removed first to reduce quadrature error near the wall.
    """
    nodes, Q = edge_midpoint_rule(mesh)
    c = Q.T @ traces.t
    phi = traces.phi
    if subtract_mean:
        d = np.asarray(Q.sum(axis=1)).ravel()  # triangle areas
        phi_mean = np.dot(mesh.areas, phi[mesh.triangles].mean(axis=1)) / d.sum()
        phi = phi - phi_mean
    e = mesh.edges
    phi_mid = 0.5 * (phi[e[:, 0]] + phi[e[:, 1]])
    b = phi_mid[:, None] * (Q.T @ mesh.normals)
    return nodes, c, b


def _boundary_gradient_direct(points, nodes, c, b, delta):
    out = np.zeros((len(points), 3))
    for s in range(0, len(points), 1024):
        d = points[s:s + 1024, None, :] - nodes[None, :, :]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        r = np.sqrt(r2)
        with np.errstate(divide="ignore", invalid="ignore"):
            ir3 = np.where(r > delta, 1.0 / (r2 * r), 0.0)
            bd = np.einsum("ijk,jk->ij", d, b)
            g = c[None, :] * ir3 - 3.0 * bd * ir3 / np.where(r > delta, r2, 1.0)
        out[s:s + 1024] = (np.einsum("ij,ijk->ik", g, d) + ir3 @ b) / FOUR_PI
    return out


def evaluate_field_at(points, traces, mesh, particles=None, params=None, background=False,
                      h2=H2Config(), direct=None):
    """Electric field at arbitrary interior points (no self-exclusion)."""
    beta = (params or NondimensionalParameters.unit()).beta
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, wq = _positions_and_charges(particles)
    nodes, c, b = boundary_moments(mesh, traces)
    if direct is None:
        direct = len(pts) * len(nodes) <= 4_000_000
    if direct:
        Eb = _boundary_gradient_direct(pts, nodes, c, b, h2.delta)
        Ep = np.zeros_like(pts)
        if len(wq):
            K = LaplaceGradientKernel(1.0 / (FOUR_PI * beta), h2.delta)
            Ep = np.einsum("ijk,j->ik", dense_kernel_matrix(K, pts, x), wq)
    else:
        pb = ClusterBasis(build_cluster_tree(pts, h2.leaf_cap), h2.order)
        nb = ClusterBasis(build_cluster_tree(nodes, h2.leaf_cap), h2.order)
        op = H2Matrix(pb, nb, LaplaceGradientKernel(1.0 / FOUR_PI, h2.delta), cfg=h2.admissibility)
        Eb = op.matvec_dipole(c, b)
        Ep = np.zeros_like(pts)
        if len(wq):
            xb = ClusterBasis(build_cluster_tree(x, h2.leaf_cap), h2.order)
            opp = H2Matrix(pb, xb, LaplaceGradientKernel(1.0 / (FOUR_PI * beta), h2.delta),
                           cfg=h2.admissibility)
            Ep = opp.matvec(wq)
    parts = {"boundary": Eb, "particle": Ep}
    if background:
        parts["background"] = background_field(pts, beta)
    return FieldReport(E=sum(parts.values()), parts=parts)


def evaluate_total_field(traces, mesh, particles, params=None, background=False, h2=H2Config(),
                         particle_op=None, coupling=None, flag_distance=True):
    """Field at the particles: boundary layers + Coulomb sum over j != i + background.

    Parameters
    ----------
    particle_op : H2Matrix, optional
        Particle-particle gradient operator already built for the current
        positions (scale 1/(4 pi beta), diagonal excluded).
    coupling : ParticleBoundaryCoupling over the edge midpoints, optional
    """
    beta = (params or NondimensionalParameters.unit()).beta
    x, wq = _positions_and_charges(particles)
    n = len(x)
    timings = {}
    if n == 0:
        return FieldReport(E=np.zeros((0, 3)), parts={}, unreliable=np.zeros(0, dtype=bool))
    t0 = time.perf_counter()
    if particle_op is None:
        basis = ClusterBasis(build_cluster_tree(x, h2.leaf_cap), h2.order)
        particle_op = H2Matrix(basis, basis, LaplaceGradientKernel(1.0 / (FOUR_PI * beta), h2.delta),
                               cfg=h2.admissibility, mode=h2.mode)
    Ep = particle_op.matvec(wq)
    t1 = time.perf_counter()
    nodes, c, b = boundary_moments(mesh, traces)
    if coupling is None:
        nb = ClusterBasis(build_cluster_tree(nodes, h2.leaf_cap), h2.order)
        coupling = ParticleBoundaryCoupling(nb, beta, h2.delta, h2.order, h2.leaf_cap,
                                            h2.admissibility).rebuild(x, particle_op.row_basis)
    Eb = coupling.gradient_op.matvec_dipole(c, b)
    t2 = time.perf_counter()
    timings["particle_field"] = t1 - t0
    timings["boundary_field"] = t2 - t1
    parts = {"particle": Ep, "boundary": Eb}
    if background:
        parts["background"] = background_field(x, beta)
    unreliable = None
    if flag_distance:
        unreliable = mesh.distance_to_boundary(x) <= max(h2.delta, 0.0)
        if unreliable.any():
            log.debug("%d particles within delta of the boundary", int(unreliable.sum()))
    return FieldReport(E=sum(parts.values()), parts=parts, unreliable=unreliable, timings=timings)


def newton_flux(mesh, positions, wq, beta):
    """Exact flux of grad phi_p through every triangle via solid angles.

    ``int_tau n . grad phi_p ds = -(1/beta) sum_j wq_j Omega_j(tau) / (4 pi)``.
    """
    out = np.zeros(mesh.n_triangles)
    c = mesh.corners
    for s in range(0, len(positions), 256):
        p = positions[s:s + 256]
        R = c[None, :, :, :] - p[:, None, None, :]  # (np, nt, 3, 3)
        r = np.linalg.norm(R, axis=-1)
        R1, R2, R3 = R[:, :, 0], R[:, :, 1], R[:, :, 2]
        num = np.einsum("ijk,ijk->ij", R1, np.cross(R2, R3))
        den = (r[..., 0] * r[..., 1] * r[..., 2]
               + np.einsum("ijk,ijk->ij", R1, R2) * r[..., 2]
               + np.einsum("ijk,ijk->ij", R1, R3) * r[..., 1]
               + np.einsum("ijk,ijk->ij", R2, R3) * r[..., 0])
        omega = 2.0 * np.arctan2(num, den)
        out -= (wq[s:s + 256] @ omega) / (FOUR_PI * beta)
    return out


def image_charge_field(points, charge_pos, q, beta, radius=1.0):
    """Field inside a grounded sphere: charge plus Kelvin image."""
    a = np.asarray(charge_pos, dtype=np.float64)
    na = np.linalg.norm(a)
    img = a * (radius**2 / na**2)
    qi = -q * radius / na
    pts = np.atleast_2d(points)
    d1 = pts - a
    d2 = pts - img
    E = q * d1 / np.linalg.norm(d1, axis=1)[:, None] ** 3
    E += qi * d2 / np.linalg.norm(d2, axis=1)[:, None] ** 3
    return E / (FOUR_PI * beta)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

class FieldSolver:
    """Per-step field computation with cached boundary structures.

    The Galerkin matrices, factorisations and the trees over the edge
    midpoints and vertices are built once; particle trees and bases are
    rebuilt on every call of :meth:`compute`.
    """

    def __init__(self, mesh, bc, mats, params, h2=H2Config(), solver=SolverConfig(),
                 background=False):
        self.mesh = mesh
        self.bc = bc
        self.mats = mats
        self.params = params
        self.h2 = h2
        self.background = background
        self.solver_cfg = solver
        bc.check(mesh, allow_pure_neumann=True)
        if bc.is_pure_dirichlet(mesh):
            self.kind = "dirichlet"
        elif bc.is_pure_neumann(mesh):
            self.kind = "neumann"
        else:
            self.kind = "mixed"
        beta = params.beta
        nodes, _ = edge_midpoint_rule(mesh)
        self.node_basis = ClusterBasis(build_cluster_tree(nodes, h2.leaf_cap), h2.order)
        self.edge_coupling = ParticleBoundaryCoupling(self.node_basis, beta, h2.delta, h2.order,
                                                      h2.leaf_cap, h2.admissibility)
        self.vertex_coupling = None
        self.V_solver = None
        self.system = None
        if self.kind == "dirichlet":
            vb = ClusterBasis(build_cluster_tree(mesh.vertices, h2.leaf_cap), h2.order)
            self.vertex_coupling = ParticleBoundaryCoupling(vb, beta, h2.delta, h2.order,
                                                            h2.leaf_cap, h2.admissibility)
            self.V_solver = LinearSolver(mats.V_dense(), solver.single_layer, solver.preconditioner,
                                         spd=True)
        elif self.kind == "mixed":
            self.system = MixedSystem(mats, mesh, bc, solver.mixed, solver.preconditioner)
        self.particle_op = None

    def rebuild(self, x):
        h2 = self.h2
        basis = ClusterBasis(build_cluster_tree(x, h2.leaf_cap), h2.order)
        kern = LaplaceGradientKernel(1.0 / (FOUR_PI * self.params.beta), h2.delta)
        self.particle_op = H2Matrix(basis, basis, kern, cfg=h2.admissibility, mode=h2.mode)
        self.edge_coupling.rebuild(x, basis)
        if self.vertex_coupling is not None:
            self.vertex_coupling.rebuild(x, basis)

    def compute(self, x, wq):
        """Return ``(FieldReport, TraceSolution)`` for particles at ``x``."""
        timings = {}
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        wq = np.asarray(wq, dtype=np.float64)
        mesh, beta = self.mesh, self.params.beta
        t = time.perf_counter()
        have = len(x) > 0
        if have:
            self.rebuild(x)
        timings["rebuild"] = time.perf_counter() - t
        t = time.perf_counter()
        parts = (x, wq)
        if self.kind == "dirichlet":
            vpot = self.vertex_coupling.potential_at_boundary(wq) if have else np.zeros(mesh.n_vertices)
            timings["newton"] = time.perf_counter() - t
            t = time.perf_counter()
            traces = solve_dirichlet(self.mats, mesh, self.bc, None, self.params, self.h2,
                                     self.background, solver=self.V_solver, phi_p=vpot)
        else:
            N0 = (self.edge_coupling_N0(wq) if have else np.zeros(mesh.n_triangles))
            timings["newton"] = time.perf_counter() - t
            t = time.perf_counter()
            if self.kind == "mixed":
                traces = solve_mixed(self.mats, mesh, self.bc, parts, self.params, self.h2,
                                     self.background, system=self.system, N0=N0)
            else:
                traces = solve_neumann(self.mats, mesh, self.bc, parts, self.params,
                                       self.solver_cfg.alpha, self.h2, self.background, N0=N0)
        timings["solve"] = time.perf_counter() - t
        if not have:
            return FieldReport(np.zeros((0, 3)), {}, np.zeros(0, dtype=bool), timings), traces
        report = evaluate_total_field(traces, mesh, parts, self.params, self.background, self.h2,
                                      particle_op=self.particle_op, coupling=self.edge_coupling,
                                      flag_distance=False)
        report.timings.update(timings)
        return report, traces

    def edge_coupling_N0(self, wq):
        _, Q = edge_midpoint_rule(self.mesh)
        return Q @ self.edge_coupling.potential_at_boundary(wq)
