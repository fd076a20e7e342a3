"""Galerkin boundary element matrices for the Laplace equation and the
Newton potential traces of a particle cloud.

Conventions: ``V[l, k]`` single layer with piecewise constants on both
sides, ``K[l, i]`` double layer tested with the constant on triangle ``l``
and the hat function of node ``i`` as trial, ``D[j, i]`` hypersingular
operator on hat functions and ``M[l, i]`` the mixed mass matrix.
"""
from __future__ import annotations

import hashlib
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp

from .cluster import AdmissibilityConfig, DEFAULT_LEAF_CAP, DEFAULT_ORDER, build_cluster_tree, build_block_tree
from .h2 import ClusterBasis, H2Matrix, LaplaceKernel, LaplaceGradientKernel
from .mesh import MeshError, SurfaceMesh
from .quadrature import QuadratureConfig, collapsed_gauss, regular_rule, sauter_schwab, ss_to_barycentric

log = logging.getLogger(__name__)

__all__ = [
    "GalerkinMatrices",
    "QuadratureConfig",
    "assemble_galerkin",
    "mass_matrix",
    "surface_curls",
    "edge_midpoint_rule",
    "assemble_N0",
    "assemble_N1",
    "newton_potential_direct",
    "ParticleBoundaryCoupling",
    "save_matrices",
    "load_matrices",
    "H2Galerkin",
]

FOUR_PI = 4.0 * math.pi


# --------------------------------------------------------------------------
# pair integrals
# --------------------------------------------------------------------------

@numba.njit(cache=True, inline="always")
def _rule_sum(xk, yl, nl, wx, wy, bx, by, do_k):
    # sum_p sum_q wx_p wy_q [1/r, n.(x-y)/r^3 * lambda_c(y)]
    v = 0.0
    k0 = 0.0
    k1 = 0.0
    k2 = 0.0
    for p in range(xk.shape[0]):
        for q in range(yl.shape[0]):
            d0 = xk[p, 0] - yl[q, 0]
            d1 = xk[p, 1] - yl[q, 1]
            d2 = xk[p, 2] - yl[q, 2]
            r2 = d0 * d0 + d1 * d1 + d2 * d2
            r = math.sqrt(r2)
            w = wx[p] * wy[q]
            v += w / r
            if do_k:
                g = w * (nl[0] * d0 + nl[1] * d1 + nl[2] * d2) / (r2 * r)
                k0 += g * by[q, 0]
                k1 += g * by[q, 1]
                k2 += g * by[q, 2]
    return v, k0, k1, k2


@numba.njit(cache=True)
def _map(bary, c):
    out = np.empty((bary.shape[0], 3))
    for q in range(bary.shape[0]):
        for a in range(3):
            out[q, a] = bary[q, 0] * c[0, a] + bary[q, 1] * c[1, a] + bary[q, 2] * c[2, a]
    return out


@numba.njit(cache=True)
def _pair(k, l, tri, corners, normals, areas, cents, diams,
          regb, regw, reg_pts, nearb, nearw, ss_bx, ss_by, ss_w, near_factor, do_k):
    """Integrals over triangle pair (k test, l trial).

    Returns (v, K contributions for the three local corners of l).
    """
    shared = 0
    for a in range(3):
        for b in range(3):
            if tri[k, a] == tri[l, b]:
                shared += 1
    nl = normals[l]
    scale = areas[k] * areas[l] / (4.0 * math.pi)
    if shared == 0:
        dx = cents[k, 0] - cents[l, 0]
        dy = cents[k, 1] - cents[l, 1]
        dz = cents[k, 2] - cents[l, 2]
        dist = math.sqrt(dx * dx + dy * dy + dz * dz)
        if dist < near_factor * max(diams[k], diams[l]):
            xk = _map(nearb, corners[k])
            yl = _map(nearb, corners[l])
            v, c0, c1, c2 = _rule_sum(xk, yl, nl, nearw, nearw, nearb, nearb, do_k)
        else:
            v, c0, c1, c2 = _rule_sum(reg_pts[k], reg_pts[l], nl, regw, regw, regb, regb, do_k)
        return v * scale, c0 * scale, c1 * scale, c2 * scale
    # local orderings with the shared vertices first, in matching order
    ox = np.empty(3, dtype=np.int64)
    oy = np.empty(3, dtype=np.int64)
    if shared == 3:
        case = 0
        for a in range(3):
            ox[a] = a
            oy[a] = a
    else:
        case = 1 if shared == 2 else 2
        m = 0
        for a in range(3):
            for b in range(3):
                if tri[k, a] == tri[l, b]:
                    ox[m] = a
                    oy[m] = b
                    m += 1
        mx = m
        my = m
        for a in range(3):
            used = False
            for j in range(m):
                if ox[j] == a:
                    used = True
            if not used:
                ox[mx] = a
                mx += 1
        for b in range(3):
            used = False
            for j in range(m):
                if oy[j] == b:
                    used = True
            if not used:
                oy[my] = b
                my += 1
    bx = ss_bx[case]
    by = ss_by[case]
    w = ss_w[case]
    n = w.shape[0]
    ck = np.empty((3, 3))
    cl = np.empty((3, 3))
    for a in range(3):
        for c in range(3):
            ck[a, c] = corners[k, ox[a], c]
            cl[a, c] = corners[l, oy[a], c]
    v = 0.0
    kk = np.zeros(3)
    for q in range(n):
        if w[q] == 0.0:
            continue
        x0 = bx[q, 0] * ck[0, 0] + bx[q, 1] * ck[1, 0] + bx[q, 2] * ck[2, 0]
        x1 = bx[q, 0] * ck[0, 1] + bx[q, 1] * ck[1, 1] + bx[q, 2] * ck[2, 1]
        x2 = bx[q, 0] * ck[0, 2] + bx[q, 1] * ck[1, 2] + bx[q, 2] * ck[2, 2]
        d0 = x0 - (by[q, 0] * cl[0, 0] + by[q, 1] * cl[1, 0] + by[q, 2] * cl[2, 0])
        d1 = x1 - (by[q, 0] * cl[0, 1] + by[q, 1] * cl[1, 1] + by[q, 2] * cl[2, 1])
        d2 = x2 - (by[q, 0] * cl[0, 2] + by[q, 1] * cl[1, 2] + by[q, 2] * cl[2, 2])
        r2 = d0 * d0 + d1 * d1 + d2 * d2
        r = math.sqrt(r2)
        v += w[q] / r
        if do_k and case != 0:
            g = w[q] * (nl[0] * d0 + nl[1] * d1 + nl[2] * d2) / (r2 * r)
            for a in range(3):
                kk[oy[a]] += g * by[q, a]
    # reference pair weights integrate to 1/4; Jacobians are 2*area each
    s = 4.0 * scale
    return v * s, kk[0] * s, kk[1] * s, kk[2] * s


@numba.njit(cache=True)
def _assemble_dense(tri, corners, normals, areas, cents, diams, regb, regw, reg_pts,
                    nearb, nearw, ss_bx, ss_by, ss_w, near_factor, V, K):
    n = tri.shape[0]
    for k in range(n):
        for l in range(n):
            v, c0, c1, c2 = _pair(k, l, tri, corners, normals, areas, cents, diams, regb, regw,
                                  reg_pts, nearb, nearw, ss_bx, ss_by, ss_w, near_factor, True)
            if l >= k:
                V[k, l] = v
                V[l, k] = v
            K[k, tri[l, 0]] += c0
            K[k, tri[l, 1]] += c1
            K[k, tri[l, 2]] += c2


@numba.njit(cache=True)
def _assemble_pairs(ks, ls, tri, corners, normals, areas, cents, diams, regb, regw, reg_pts,
                    nearb, nearw, ss_bx, ss_by, ss_w, near_factor, do_k):
    out = np.empty((ks.shape[0], 4))
    for p in range(ks.shape[0]):
        v, c0, c1, c2 = _pair(ks[p], ls[p], tri, corners, normals, areas, cents, diams, regb,
                              regw, reg_pts, nearb, nearw, ss_bx, ss_by, ss_w, near_factor, do_k)
        out[p, 0] = v
        out[p, 1] = c0
        out[p, 2] = c1
        out[p, 3] = c2
    return out


class _PairIntegrator:
    """Geometry and rule tables shared by dense and blockwise assembly."""

    def __init__(self, mesh, quad):
        self.mesh = mesh
        self.quad = quad
        self.regb, self.regw = regular_rule(quad.regular_points)
        self.nearb, self.nearw = collapsed_gauss(quad.near_order)
        rules = sauter_schwab(quad.singular_order)
        n = max(len(r[2]) for r in rules.values())
        self.ss_bx = np.zeros((3, n, 3))
        self.ss_by = np.zeros((3, n, 3))
        self.ss_w = np.zeros((3, n))
        for i, name in enumerate(("identical", "edge", "vertex")):
            xh, yh, w = rules[name]
            m = len(w)
            self.ss_bx[i, :m] = ss_to_barycentric(xh)
            self.ss_by[i, :m] = ss_to_barycentric(yh)
            self.ss_w[i, :m] = w
        c = mesh.corners
        self.reg_pts = np.ascontiguousarray(np.einsum("qa,kac->kqc", self.regb, c))
        self.args = (mesh.triangles, np.ascontiguousarray(c), mesh.normals, mesh.areas,
                     mesh.centroids, mesh.diameters, self.regb, self.regw, self.reg_pts,
                     self.nearb, self.nearw, self.ss_bx, self.ss_by, self.ss_w,
                     float(quad.near_factor))

    def dense(self):
        n, m = self.mesh.n_triangles, self.mesh.n_vertices
        V = np.zeros((n, n))
        K = np.zeros((n, m))
        _assemble_dense(*self.args, V, K)
        return V, K

    def pairs(self, ks, ls, do_k=True):
        return _assemble_pairs(np.asarray(ks, dtype=np.int64), np.asarray(ls, dtype=np.int64),
                               *self.args, do_k)


# --------------------------------------------------------------------------
# sparse parts
# --------------------------------------------------------------------------

def mass_matrix(mesh):
    """``M[l, i] = area_l / 3`` for each corner ``i`` of triangle ``l``."""
    nt = mesh.n_triangles
    rows = np.repeat(np.arange(nt), 3)
    vals = np.repeat(mesh.areas / 3.0, 3)
    return sp.csr_matrix((vals, (rows, mesh.triangles.ravel())), shape=(nt, mesh.n_vertices))


def surface_curls(mesh):
    """Sparse matrices C_c (c = x, y, z): surface curl of each hat on each triangle.

    On triangle (p0, p1, p2) the curl of the hat of p0 is (p1 - p2) / (2 area)
    up to a global sign, which cancels in the hypersingular form.
    """
    c = mesh.corners
    two_a = 2.0 * mesh.areas[:, None]
    curls = np.stack([(c[:, 1] - c[:, 2]) / two_a,
                      (c[:, 2] - c[:, 0]) / two_a,
                      (c[:, 0] - c[:, 1]) / two_a], axis=1)  # (nt, 3 corners, 3 comps)
    rows = np.repeat(np.arange(mesh.n_triangles), 3)
    cols = mesh.triangles.ravel()
    shape = (mesh.n_triangles, mesh.n_vertices)
    return [sp.csr_matrix((curls[:, :, a].ravel(), (rows, cols)), shape=shape) for a in range(3)]


def edge_midpoint_rule(mesh):
    """Global edge-midpoint nodes and the sparse map to triangle integrals.

    Returns ``nodes (ne, 3)`` and ``Q (nt, ne)`` with ``Q[l, e] = area_l/3`` for
    the three edges of triangle ``l``; ``Q @ f(nodes)`` approximates the
    integrals of ``f`` over the triangles (exact for quadratics).
    """
    nt = mesh.n_triangles
    rows = np.repeat(np.arange(nt), 3)
    vals = np.repeat(mesh.areas / 3.0, 3)
    Q = sp.csr_matrix((vals, (rows, mesh.triangle_edges.ravel())),
                      shape=(nt, len(mesh.edges)))
    return mesh.edge_midpoints, Q


# --------------------------------------------------------------------------
# matrices
# --------------------------------------------------------------------------

@dataclass
class GalerkinMatrices:
    V: object  # (nt, nt) ndarray or H2Galerkin
    K: object  # (nt, nv)
    D: np.ndarray  # (nv, nv)
    M: sp.csr_matrix  # (nt, nv)
    mesh_hash: str = ""
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)
    _chol: object = None

    @property
    def n_triangles(self):
        return self.M.shape[0]

    @property
    def n_vertices(self):
        return self.M.shape[1]

    @property
    def d(self):
        """``d[i] = integral of hat i`` (column sums of M)."""
        return np.asarray(self.M.sum(axis=0)).ravel()

    def V_dense(self):
        return self.V if isinstance(self.V, np.ndarray) else self.V.V_dense()

    def K_dense(self):
        return self.K if isinstance(self.K, np.ndarray) else self.K.K_dense()

    def V_factor(self):
        """Cached Cholesky factor of the dense single layer matrix."""
        if self._chol is None:
            from scipy.linalg import cho_factor
            self._chol = cho_factor(self.V_dense(), lower=True, check_finite=False)
        return self._chol

    def solve_V(self, rhs):
        from scipy.linalg import cho_solve
        return cho_solve(self.V_factor(), rhs, check_finite=False)

    def double_layer_rhs(self, phi):
        """``(M/2 + K) phi``."""
        return 0.5 * (self.M @ phi) + self.K @ phi


def _hypersingular(mesh, V):
    curls = surface_curls(mesh)
    D = np.zeros((mesh.n_vertices, mesh.n_vertices))
    for C in curls:
        CtV = (C.T @ V)  # (nv, nt) dense
        D += np.asarray((C.T @ CtV.T).T)
    return 0.5 * (D + D.T)


def assemble_galerkin(mesh, quad=QuadratureConfig(), cache_dir=None):
    """Dense Galerkin matrices V, K, D, M for a closed mesh.

    Parameters
    ----------
    mesh : SurfaceMesh
    quad : QuadratureConfig
    cache_dir : path, optional
        Directory of the binary matrix cache; matrices are loaded from there
        when present and written after assembly otherwise.
    """
    if not isinstance(mesh, SurfaceMesh):
        raise TypeError("assemble_galerkin needs a SurfaceMesh")
    mesh.validate()
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"galerkin-{mesh.hash[:20]}-{quad.key()}.bin"
        if path.exists():
            mats = load_matrices(path)
            log.info("loaded Galerkin matrices from %s", path)
            return GalerkinMatrices(V=mats["V"], K=mats["K"], D=mats["D"], M=mass_matrix(mesh),
                                    mesh_hash=mesh.hash, quad=quad)
    V, K = _PairIntegrator(mesh, quad).dense()
    D = _hypersingular(mesh, V)
    mats = GalerkinMatrices(V=V, K=K, D=D, M=mass_matrix(mesh), mesh_hash=mesh.hash, quad=quad)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_matrices(path, {"V": V, "K": K, "D": D})
    return mats


# --------------------------------------------------------------------------
# H2-compressed Galerkin operators
# --------------------------------------------------------------------------

class H2Galerkin:
    """H2 approximations of V and K built from quadrature functionals.

    Row clusters are triangles, column clusters are triangles (V) or
    vertices (K).  Bounding boxes enclose the supports; nearfield blocks are
    filled with the same pair integrals as the dense assembly.  The default
    order is 7 because K differentiates the interpolant, which costs about
    one order of accuracy against V.
    """

    def __init__(self, mesh, quad=QuadratureConfig(), order=7,
                 leaf_cap=DEFAULT_LEAF_CAP // 4, cfg=AdmissibilityConfig()):
        self.mesh = mesh
        self.integrator = _PairIntegrator(mesh, quad)
        c = mesh.corners
        tri_ext = np.stack([c.min(axis=1), c.max(axis=1)], axis=1)
        self.tri_tree = build_cluster_tree(mesh.centroids, leaf_cap, extents=tri_ext)
        nv = mesh.n_vertices
        vlo = np.full((nv, 3), np.inf)
        vhi = np.full((nv, 3), -np.inf)
        for a in range(3):
            np.minimum.at(vlo, mesh.triangles[:, a], tri_ext[:, 0])
            np.maximum.at(vhi, mesh.triangles[:, a], tri_ext[:, 1])
        self.vert_tree = build_cluster_tree(mesh.vertices, leaf_cap, extents=np.stack([vlo, vhi], 1))
        regb, regw = self.integrator.regb, self.integrator.regw
        nq = len(regw)
        qpts = self.integrator.reg_pts.reshape(-1, 3)
        qw = (mesh.areas[:, None] * regw[None, :]).ravel()
        qtri = np.repeat(np.arange(mesh.n_triangles), nq)
        inv_t = np.empty(mesh.n_triangles, dtype=np.int64)
        inv_t[self.tri_tree.perm] = np.arange(mesh.n_triangles)
        inv_v = np.empty(nv, dtype=np.int64)
        inv_v[self.vert_tree.perm] = np.arange(nv)
        self.tri_basis = ClusterBasis(self.tri_tree, order, leaf_points=False)
        self.tri_basis.set_functional_leaves(inv_t[qtri], qw, qpts)
        # hat trial with normal derivative: one entry per (quadrature point, corner)
        hat_w = (qw[:, None] * np.tile(regb, (mesh.n_triangles, 1))).ravel()
        hat_owner = inv_v[mesh.triangles[qtri]].ravel()
        hat_pts = np.repeat(qpts, 3, axis=0)
        hat_n = np.repeat(mesh.normals[qtri], 3, axis=0)
        self.vert_basis = ClusterBasis(self.vert_tree, order, leaf_points=False)
        self.vert_basis.set_functional_leaves(hat_owner, hat_w, hat_pts, hat_n)
        self.V_blocks = build_block_tree(self.tri_tree, self.tri_tree, cfg)
        self.K_blocks = build_block_tree(self.tri_tree, self.vert_tree, cfg)
        self._V_near = self._near_V()
        self._K_near = self._near_K()
        self._V_coupling = self._coupling(self.tri_basis, self.tri_basis, self.V_blocks)
        self._K_coupling = self._coupling(self.tri_basis, self.vert_basis, self.K_blocks)

    @staticmethod
    def _coupling(rb, cb, blocks):
        from .h2 import _coupling_blocks
        return _coupling_blocks(blocks.admissible, rb.grid, cb.grid, 1.0 / FOUR_PI, 0.0, False)

    def _near_V(self):
        t = self.tri_tree
        out = []
        for a, b in self.V_blocks.nearfield:
            rows = t.perm[t.start[a]:t.end[a]]
            cols = t.perm[t.start[b]:t.end[b]]
            ks, ls = np.repeat(rows, len(cols)), np.tile(cols, len(rows))
            out.append(self.integrator.pairs(ks, ls, do_k=False)[:, 0].reshape(len(rows), len(cols)))
        return out

    def _near_K(self):
        t, v = self.tri_tree, self.vert_tree
        mesh = self.mesh
        # triangles touching each vertex
        vt = sp.csr_matrix((np.ones(3 * mesh.n_triangles),
                            (mesh.triangles.ravel(), np.repeat(np.arange(mesh.n_triangles), 3))),
                           shape=(mesh.n_vertices, mesh.n_triangles))
        out = []
        for a, b in self.K_blocks.nearfield:
            rows = t.perm[t.start[a]:t.end[a]]
            cols = v.perm[v.start[b]:v.end[b]]
            local = -np.ones(mesh.n_vertices, dtype=np.int64)
            local[cols] = np.arange(len(cols))
            tris = np.unique(vt[cols].indices)
            ks, ls = np.repeat(rows, len(tris)), np.tile(tris, len(rows))
            vals = self.integrator.pairs(ks, ls)
            blk = np.zeros((len(rows), len(cols)))
            ri = np.repeat(np.arange(len(rows)), len(tris))
            for c in range(3):
                lc = local[mesh.triangles[ls, c]]
                m = lc >= 0
                np.add.at(blk, (ri[m], lc[m]), vals[m, 1 + c])
            out.append(blk)
        return out

    def _apply(self, rb, cb, blocks, coupling, near, x):
        from .h2 import _apply_coupling
        rt, ct = rb.tree, cb.tree
        xs = x[ct.perm]
        xhat = cb.forward(xs)
        yhat = np.zeros((rt.n_nodes, rb.n3, 1))
        _apply_coupling(blocks.admissible, coupling, xhat, yhat)
        ys = np.zeros((rt.n_points, 1))
        for (a, b), blk in zip(blocks.nearfield, near):
            ys[rt.start[a]:rt.end[a], 0] += blk @ xs[ct.start[b]:ct.end[b]]
        rb.backward(yhat, ys)
        y = np.empty(rt.n_points)
        y[rt.perm] = ys[:, 0]
        return y

    def matvec_V(self, x):
        return self._apply(self.tri_basis, self.tri_basis, self.V_blocks, self._V_coupling,
                           self._V_near, np.asarray(x, dtype=np.float64))

    def matvec_K(self, x):
        return self._apply(self.tri_basis, self.vert_basis, self.K_blocks, self._K_coupling,
                           self._K_near, np.asarray(x, dtype=np.float64))

    def memory_footprint(self):
        n3 = self.tri_basis.n3
        f = self.tri_basis.n_floats() + self.vert_basis.n_floats()
        f += (self.V_blocks.n_admissible + self.K_blocks.n_admissible) * n3 * n3
        f += sum(b.size for b in self._V_near) + sum(b.size for b in self._K_near)
        return 8 * f


# --------------------------------------------------------------------------
# binary cache
# --------------------------------------------------------------------------

CACHE_MAGIC = b"H2PBEM\x00\x01"
CACHE_VERSION = 1


def save_matrices(path, matrices):
    """Write named dense matrices.

    Layout (little endian): 8-byte magic, uint32 version, uint32 count, then
    per matrix a 16-byte zero-padded ASCII name, uint64 rows, uint64 cols and
    rows*cols float64 values in row-major order.
    """
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<II", CACHE_VERSION, len(matrices)))
        for name, a in matrices.items():
            a = np.ascontiguousarray(a, dtype="<f8")
            f.write(name.encode("ascii")[:16].ljust(16, b"\x00"))
            f.write(struct.pack("<QQ", a.shape[0], a.shape[1]))
            f.write(a.tobytes())


def load_matrices(path):
    with open(path, "rb") as f:
        if f.read(8) != CACHE_MAGIC:
            raise ValueError(f"{path}: not a matrix cache file")
        version, count = struct.unpack("<II", f.read(8))
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        out = {}
        for _ in range(count):
            name = f.read(16).rstrip(b"\x00").decode("ascii")
            rows, cols = struct.unpack("<QQ", f.read(16))
            out[name] = np.frombuffer(f.read(8 * rows * cols), dtype="<f8").reshape(rows, cols).copy()
    return out


# --------------------------------------------------------------------------
# Newton potential
# --------------------------------------------------------------------------

def newton_potential_direct(targets, positions, wq, beta, delta=0.0):
    """O(n m) reference for ``(1/beta) sum_j wq_j U_delta(x, x_j)``."""
    from .h2 import dense_kernel_matrix
    K = LaplaceKernel(scale=1.0 / (FOUR_PI * beta), delta=delta)
    out = np.zeros(len(targets))
    for s in range(0, len(targets), 2048):
        out[s:s + 2048] = dense_kernel_matrix(K, targets[s:s + 2048], positions) @ wq
    return out


class ParticleBoundaryCoupling:
    """H2 structures between a particle cloud and a static boundary point set.

    The boundary tree and basis are passed in and reused across time steps;
    the particle tree, basis and block tree are rebuilt by :meth:`rebuild`.
    One block tree serves both directions: potentials at boundary points
    (transpose product) and gradients at the particles.
    """

    def __init__(self, boundary_basis, beta, delta=0.0, order=DEFAULT_ORDER,
                 leaf_cap=DEFAULT_LEAF_CAP, cfg=AdmissibilityConfig()):
        self.boundary_basis = boundary_basis
        self.beta = float(beta)
        self.delta = float(delta)
        self.order = order
        self.leaf_cap = leaf_cap
        self.cfg = cfg
        self.particle_basis = None
        self.potential_op = None
        self.gradient_op = None

    def rebuild(self, positions, particle_basis=None):
        if particle_basis is None:
            tree = build_cluster_tree(positions, self.leaf_cap)
            particle_basis = ClusterBasis(tree, self.order)
        self.particle_basis = particle_basis
        blocks = build_block_tree(particle_basis.tree, self.boundary_basis.tree, self.cfg)
        s = 1.0 / (FOUR_PI * self.beta)
        self.potential_op = H2Matrix(particle_basis, self.boundary_basis,
                                     LaplaceKernel(scale=s, delta=self.delta), blocks=blocks)
        self.gradient_op = H2Matrix(particle_basis, self.boundary_basis,
                                    LaplaceGradientKernel(scale=1.0 / FOUR_PI, delta=self.delta),
                                    blocks=blocks)
        return self

    def potential_at_boundary(self, wq):
        """``Phi^T wq``: Newton potential at the boundary points."""
        y = self.potential_op.rmatvec(wq)
        if self.potential_op.last_regularized:
            warnings.warn(f"{self.potential_op.last_regularized} particle/quadrature pairs "
                          f"closer than delta={self.delta:g}; regularised values used",
                          RuntimeWarning, stacklevel=2)
        return y


def assemble_N0(mesh, positions, wq, beta, delta=0.0, coupling=None, order=DEFAULT_ORDER,
                leaf_cap=DEFAULT_LEAF_CAP, direct=False):
    """Newton potential tested with the piecewise constants: ``Q Phi^T wq``.

    Parameters
    ----------
    mesh : SurfaceMesh
    positions : (n, 3) particle positions
    wq : (n,) weighted charges ``w_j q_j``
    beta : float
    coupling : ParticleBoundaryCoupling, optional
        Prebuilt structure over the mesh edge midpoints (already rebuilt for
        ``positions``).
    direct : bool
        Use O(n * n_edges) summation instead of H2.
    """
    nodes, Q = edge_midpoint_rule(mesh)
    wq = np.asarray(wq, dtype=np.float64)
    if len(wq) == 0 or not np.any(wq):
        return np.zeros(mesh.n_triangles)
    if direct:
        phi = newton_potential_direct(nodes, positions, wq, beta, delta)
    else:
        if coupling is None:
            tree = build_cluster_tree(nodes, leaf_cap)
            coupling = ParticleBoundaryCoupling(ClusterBasis(tree, order), beta, delta, order, leaf_cap)
            coupling.rebuild(positions)
        phi = coupling.potential_at_boundary(wq)
    return Q @ phi


def assemble_N1(mats, N0):
    """Neumann trace functional of the Newton potential.

    Solves ``V z = N0`` and returns ``(-M/2 + K)^T z``.
    """
    N0 = np.asarray(N0, dtype=np.float64)
    if not np.any(N0):
        return np.zeros(mats.n_vertices)
    z = mats.solve_V(N0)
    res = np.linalg.norm(mats.V_dense() @ z - N0) / max(np.linalg.norm(N0), 1e-300)
    if not np.isfinite(res) or res > 1e-6:
        raise RuntimeError(f"single layer solve failed, relative residual {res:.3e}")
    return -0.5 * (mats.M.T @ z) + mats.K_dense().T @ z
