"""H2-matrices from tensorised Chebyshev-Lagrange interpolation.

A :class:`ClusterBasis` holds, for every cluster of a tree, the ``d**3``
interpolation nodes on its bounding box; leaf rows of the basis are Lagrange
evaluations at the member points (or quadrature functionals of them), inner
nodes only keep per-axis transfer matrices.  :class:`H2Matrix` couples a row
and a column basis through a block cluster tree.

Kernels are point kernels of the Laplace fundamental solution:

* ``LaplaceKernel``          scale / |x - y|
* ``LaplaceGradientKernel``  scale * (x - y) / |x - y|**3   (three outputs)

:meth:`H2Matrix.matvec_dipole` feeds charge and dipole moments through the
gradient kernel, which yields the gradient of a combined single and double
layer as needed by the representation formula.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numba
import numpy as np

from .cluster import (AdmissibilityConfig, DEFAULT_LEAF_CAP, DEFAULT_ORDER,
                      build_block_tree, build_cluster_tree)

__all__ = [
    "LaplaceKernel",
    "LaplaceGradientKernel",
    "regularize",
    "chebyshev_nodes",
    "lagrange_1d",
    "lagrange_1d_derivative",
    "ClusterBasis",
    "H2Matrix",
    "CoincidentPointsError",
    "assemble_h2",
    "dense_kernel_matrix",
    "H2Config",
]

FOUR_PI = 4.0 * math.pi


class CoincidentPointsError(ValueError):
    """Two distinct points coincide and the kernel is not regularised."""


@dataclass(frozen=True)
class LaplaceKernel:
    """Scalar kernel ``scale/|x-y|``, capped at ``scale/delta`` for r <= delta."""

    scale: float = 1.0 / FOUR_PI
    delta: float = 0.0
    n_out = 1

    def __call__(self, x, y):
        return dense_kernel_matrix(self, x, y)


@dataclass(frozen=True)
class LaplaceGradientKernel:
    """Vector kernel ``scale*(x-y)/|x-y|^3``, zero for r <= delta."""

    scale: float = 1.0 / FOUR_PI
    delta: float = 0.0
    n_out = 3

    def __call__(self, x, y):
        return dense_kernel_matrix(self, x, y)


def regularize(kernel, delta):
    """Return ``kernel`` with regularisation radius ``delta`` (>= 0)."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    return dataclasses.replace(kernel, delta=float(delta))


def dense_kernel_matrix(kernel, x, y, exclude_diagonal=False):
    """Dense kernel evaluation; (n, m) for scalar kernels, (n, m, 3) otherwise.

    Intended for oracles and small problems.  Coincident pairs with
    ``delta == 0`` raise unless they lie on an excluded diagonal.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    d = x[:, None, :] - y[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    mask = np.zeros(r.shape, dtype=bool)
    if exclude_diagonal:
        np.fill_diagonal(mask, True)
    close = (r <= kernel.delta) & ~mask
    if kernel.delta == 0.0 and np.any((r == 0.0) & ~mask):
        raise CoincidentPointsError("kernel evaluated at coincident points")
    with np.errstate(divide="ignore", invalid="ignore"):
        if isinstance(kernel, LaplaceKernel):
            k = kernel.scale / r
            if kernel.delta > 0:
                k[close] = kernel.scale / kernel.delta
        else:
            k = kernel.scale * d / (r**3)[..., None]
            k[close] = 0.0
    k[mask] = 0.0
    return k


# --------------------------------------------------------------------------
# interpolation
# --------------------------------------------------------------------------

def chebyshev_nodes(d):
    """First-kind Chebyshev points on [-1, 1] (descending order)."""
    k = np.arange(d)
    return np.cos((2 * k + 1) * np.pi / (2 * d))


def lagrange_1d(t, x):
    """Lagrange polynomials for nodes ``t`` (..., d) evaluated at ``x`` (...).

    Returns an array of shape (..., d).
    """
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)[..., None]
    d = t.shape[-1]
    out = np.ones(np.broadcast_shapes(t.shape, x.shape))
    for k in range(d):
        for j in range(d):
            if j != k:
                out[..., k] *= (x[..., 0] - t[..., j]) / (t[..., k] - t[..., j])
    return out


def lagrange_1d_derivative(t, x):
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)[..., None]
    d = t.shape[-1]
    out = np.zeros(np.broadcast_shapes(t.shape, x.shape))
    for k in range(d):
        for m in range(d):
            if m == k:
                continue
            term = 1.0 / (t[..., k] - t[..., m])
            for j in range(d):
                if j != k and j != m:
                    term = term * (x[..., 0] - t[..., j]) / (t[..., k] - t[..., j])
            out[..., k] += term
    return out


def _tensor(lx, ly, lz):
    """(m, d) x3 -> (m, d^3) with index a*d*d + b*d + c."""
    m, d = lx.shape
    return (lx[:, :, None, None] * ly[:, None, :, None] * lz[:, None, None, :]).reshape(m, d**3)


class ClusterBasis:
    """Nested Chebyshev interpolation basis over a cluster tree.

    Parameters
    ----------
    tree : ClusterTree
    order : int
        Interpolation nodes per axis; every cluster carries ``order**3`` nodes.
    leaf_points : bool
        Build leaf rows as Lagrange evaluations at the tree points.  Set to
        False and call :meth:`set_functional_leaves` for Galerkin bases.
    """

    def __init__(self, tree, order=DEFAULT_ORDER, leaf_points=True):
        if order < 1:
            raise ValueError("interpolation order must be >= 1")
        self.tree = tree
        self.order = d = int(order)
        self.n3 = d**3
        lo, hi = tree.lo.copy(), tree.hi.copy()
        # widen degenerate axes so the nodes stay distinct
        width = hi - lo
        floor = 1e-8 * max(float(width.max()), float(np.abs(lo).max()), float(np.abs(hi).max()), 1.0)
        thin = width < floor
        pad = 0.5 * np.where(thin, floor - width, 0.0)
        lo -= pad
        hi += pad
        ref = chebyshev_nodes(d)
        self.axis_nodes = 0.5 * (lo + hi)[:, :, None] + 0.5 * (hi - lo)[:, :, None] * ref
        a = self.axis_nodes
        grid = np.stack([
            np.broadcast_to(a[:, 0, :, None, None], (len(a), d, d, d)),
            np.broadcast_to(a[:, 1, None, :, None], (len(a), d, d, d)),
            np.broadcast_to(a[:, 2, None, None, :], (len(a), d, d, d)),
        ], axis=-1)
        self.grid = np.ascontiguousarray(grid.reshape(len(a), self.n3, 3))
        # transfer of child k into its parent, per axis: E[ax, a', a] = L^parent_a(t^child_a')
        self.transfer = np.zeros((tree.n_nodes, 3, d, d))
        par = tree.parent
        kids = np.nonzero(par >= 0)[0]
        if len(kids):
            self.transfer[kids] = lagrange_1d(a[par[kids]][:, :, None, :], a[kids])
        self.leaf_of = tree.leaf_of_point()
        self.leaf_rows = None
        self._grad_rows = None
        if leaf_points:
            self.leaf_rows = self.point_rows(tree.points)

    # ---------------------------------------------------------------- leaves
    def _axis_values(self, pts, leaf, derivative=False):
        nodes = self.axis_nodes[leaf]  # (m, 3, d)
        f = lagrange_1d_derivative if derivative else lagrange_1d
        return f(nodes, pts)

    def point_rows(self, pts, leaf=None):
        """Lagrange rows (m, d^3) for points given in tree order (or with leaves)."""
        leaf = self.leaf_of if leaf is None else leaf
        L = self._axis_values(pts, leaf)
        return _tensor(L[:, 0], L[:, 1], L[:, 2])

    def gradient_rows(self, pts=None, leaf=None):
        """Gradient of the Lagrange basis, (m, 3, d^3)."""
        if pts is None:
            if self._grad_rows is None:
                self._grad_rows = self.gradient_rows(self.tree.points, self.leaf_of)
            return self._grad_rows
        leaf = self.leaf_of if leaf is None else leaf
        L = self._axis_values(pts, leaf)
        dL = self._axis_values(pts, leaf, derivative=True)
        return np.stack([
            _tensor(dL[:, 0], L[:, 1], L[:, 2]),
            _tensor(L[:, 0], dL[:, 1], L[:, 2]),
            _tensor(L[:, 0], L[:, 1], dL[:, 2]),
        ], axis=1)

    def set_functional_leaves(self, owner, weights, points, normals=None):
        """Leaf rows as quadrature functionals.

        Row ``i`` (tree order) becomes ``sum_q weights[q] * L(points[q])``
        over the entries with ``owner[q] == i``, or the normal derivative
        ``weights[q] * normals[q] . grad L(points[q])`` when normals are
        given.  The Lagrange basis is the one of the leaf owning ``i``.
        """
        owner = np.asarray(owner)
        leaf = self.leaf_of[owner]
        if normals is None:
            rows = self.point_rows(points, leaf) * weights[:, None]
        else:
            g = self.gradient_rows(points, leaf)
            rows = np.einsum("qk,qka->qa", normals, g) * weights[:, None]
        out = np.zeros((self.tree.n_points, self.n3))
        np.add.at(out, owner, rows)
        self.leaf_rows = out
        return self

    # -------------------------------------------------------------- transforms
    def forward(self, x):
        """Upward pass: x in tree order, (n,) or (n, c) -> moments (n_nodes, n3, c)."""
        x = np.asarray(x, dtype=np.float64)
        x2 = x.reshape(len(x), -1)
        out = np.zeros((self.tree.n_nodes, self.n3, x2.shape[1]))
        _leaf_forward(self.leaf_rows, self.leaf_of, np.ascontiguousarray(x2), out)
        _upward(self.transfer, self.tree.parent, self.order, out)
        return out

    def forward_dipole(self, c, b):
        """Moments of charges ``c`` (n,) and dipoles ``b`` (n, 3), tree order.

        Uses ``c_i L(y_i) - b_i . grad L(y_i)``, the interpolant of
        ``(c + b . grad_y)`` applied to a kernel in its second argument.
        """
        out = np.zeros((self.tree.n_nodes, self.n3, 1))
        _leaf_forward(self.leaf_rows, self.leaf_of, np.ascontiguousarray(c.reshape(-1, 1)), out)
        g = self.gradient_rows()
        for k in range(3):
            _leaf_forward(g[:, k], self.leaf_of, np.ascontiguousarray(-b[:, k:k + 1]), out)
        _upward(self.transfer, self.tree.parent, self.order, out)
        return out

    def backward(self, yhat, y):
        """Downward pass adding node coefficients into y (tree order, (n, c))."""
        _downward(self.transfer, self.tree.parent, self.order, yhat)
        _leaf_backward(self.leaf_rows, self.leaf_of, yhat, y)
        return y

    def materialize(self, node):
        """Dense V_sigma (|sigma|, d^3) of ``node`` obtained through transfers."""
        t = self.tree
        s, e = t.start[node], t.end[node]
        out = np.empty((e - s, self.n3))
        for i in range(s, e):
            # walk from the leaf up to `node`, composing transfers
            row = self.leaf_rows[i].copy()
            k = self.leaf_of[i]
            while k != node:
                E = self.transfer[k]
                row = np.einsum("ia,jb,kc,ijk->abc", E[0], E[1], E[2],
                                row.reshape(self.order, self.order, self.order)).ravel()
                k = t.parent[k]
            out[i - s] = row
        return out

    def n_floats(self):
        leaf = self.tree.n_points * self.n3
        return leaf + 3 * self.order**2 * (self.tree.n_nodes - 1)


@numba.njit(cache=True)
def _leaf_forward(rows, leaf_of, x, out):
    n, n3 = rows.shape
    nc = x.shape[1]
    for i in range(n):
        k = leaf_of[i]
        for c in range(nc):
            xi = x[i, c]
            if xi != 0.0:
                for a in range(n3):
                    out[k, a, c] += rows[i, a] * xi


@numba.njit(cache=True)
def _leaf_backward(rows, leaf_of, yhat, y):
    n, n3 = rows.shape
    nc = y.shape[1]
    for i in range(n):
        k = leaf_of[i]
        for c in range(nc):
            acc = 0.0
            for a in range(n3):
                acc += rows[i, a] * yhat[k, a, c]
            y[i, c] += acc


@numba.njit(cache=True)
def _mode_product(E, src, dst, transpose, d, nc):
    # dst (+)= (E0 x E1 x E2)^T src   if transpose else   (E0 x E1 x E2) src
    # E[ax, a', a] maps parent index a to child index a'.
    tmp1 = np.zeros((d, d, d))
    tmp2 = np.zeros((d, d, d))
    for c in range(nc):
        # first axis
        for i in range(d):
            for j in range(d):
                for k in range(d):
                    acc = 0.0
                    for m in range(d):
                        if transpose:
                            acc += E[0, m, i] * src[(m * d + j) * d + k, c]
                        else:
                            acc += E[0, i, m] * src[(m * d + j) * d + k, c]
                    tmp1[i, j, k] = acc
        for i in range(d):
            for j in range(d):
                for k in range(d):
                    acc = 0.0
                    for m in range(d):
                        if transpose:
                            acc += E[1, m, j] * tmp1[i, m, k]
                        else:
                            acc += E[1, j, m] * tmp1[i, m, k]
                    tmp2[i, j, k] = acc
        for i in range(d):
            for j in range(d):
                for k in range(d):
                    acc = 0.0
                    for m in range(d):
                        if transpose:
                            acc += E[2, m, k] * tmp2[i, j, m]
                        else:
                            acc += E[2, k, m] * tmp2[i, j, m]
                    dst[(i * d + j) * d + k, c] += acc


@numba.njit(cache=True)
def _upward(transfer, parent, d, xhat):
    nc = xhat.shape[2]
    for k in range(len(parent) - 1, 0, -1):
        _mode_product(transfer[k], xhat[k], xhat[parent[k]], True, d, nc)


@numba.njit(cache=True)
def _downward(transfer, parent, d, yhat):
    nc = yhat.shape[2]
    for k in range(1, len(parent)):
        _mode_product(transfer[k], yhat[parent[k]], yhat[k], False, d, nc)


# --------------------------------------------------------------------------
# coupling and nearfield kernels
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _far_scalar(pairs, tgrid, sgrid, xhat, yhat, scale, delta):
    n3 = tgrid.shape[1]
    capped = scale / delta if delta > 0.0 else 0.0
    for p in range(pairs.shape[0]):
        t = pairs[p, 0]
        s = pairs[p, 1]
        for a in range(n3):
            x0 = tgrid[t, a, 0]
            x1 = tgrid[t, a, 1]
            x2 = tgrid[t, a, 2]
            acc = 0.0
            for b in range(n3):
                d0 = x0 - sgrid[s, b, 0]
                d1 = x1 - sgrid[s, b, 1]
                d2 = x2 - sgrid[s, b, 2]
                r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                if r <= delta:
                    acc += capped * xhat[s, b, 0]
                else:
                    acc += xhat[s, b, 0] / r * scale
            yhat[t, a, 0] += acc


@numba.njit(cache=True)
def _far_vector(pairs, tgrid, sgrid, xhat, yhat, scale, delta):
    n3 = tgrid.shape[1]
    for p in range(pairs.shape[0]):
        t = pairs[p, 0]
        s = pairs[p, 1]
        for a in range(n3):
            x0 = tgrid[t, a, 0]
            x1 = tgrid[t, a, 1]
            x2 = tgrid[t, a, 2]
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            for b in range(n3):
                d0 = x0 - sgrid[s, b, 0]
                d1 = x1 - sgrid[s, b, 1]
                d2 = x2 - sgrid[s, b, 2]
                r2 = d0 * d0 + d1 * d1 + d2 * d2
                r = math.sqrt(r2)
                if r <= delta:
                    continue
                f = xhat[s, b, 0] / (r2 * r)
                a0 += f * d0
                a1 += f * d1
                a2 += f * d2
            yhat[t, a, 0] += scale * a0
            yhat[t, a, 1] += scale * a1
            yhat[t, a, 2] += scale * a2


@numba.njit(cache=True)
def _near_scalar(pairs, tstart, tend, sstart, send, tpts, spts, x, y, scale, delta, same):
    capped = scale / delta if delta > 0.0 else 0.0
    bad = -1
    nreg = 0
    for p in range(pairs.shape[0]):
        t = pairs[p, 0]
        s = pairs[p, 1]
        for i in range(tstart[t], tend[t]):
            acc = 0.0
            for j in range(sstart[s], send[s]):
                if same and i == j:
                    continue
                d0 = tpts[i, 0] - spts[j, 0]
                d1 = tpts[i, 1] - spts[j, 1]
                d2 = tpts[i, 2] - spts[j, 2]
                r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                if r <= delta:
                    if r == 0.0 and delta == 0.0:
                        bad = i
                        continue
                    nreg += 1
                    acc += capped * x[j]
                else:
                    acc += x[j] / r * scale
            y[i, 0] += acc
    return bad, nreg


@numba.njit(cache=True)
def _near_vector(pairs, tstart, tend, sstart, send, tpts, spts, x, y, scale, delta, same):
    bad = -1
    for p in range(pairs.shape[0]):
        t = pairs[p, 0]
        s = pairs[p, 1]
        for i in range(tstart[t], tend[t]):
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            for j in range(sstart[s], send[s]):
                if same and i == j:
                    continue
                d0 = tpts[i, 0] - spts[j, 0]
                d1 = tpts[i, 1] - spts[j, 1]
                d2 = tpts[i, 2] - spts[j, 2]
                r2 = d0 * d0 + d1 * d1 + d2 * d2
                r = math.sqrt(r2)
                if r <= delta:
                    if r == 0.0 and delta == 0.0:
                        bad = i
                    continue
                # one cube of the distance shared by the three components
                f = x[j] / (r2 * r)
                a0 += f * d0
                a1 += f * d1
                a2 += f * d2
            y[i, 0] += scale * a0
            y[i, 1] += scale * a1
            y[i, 2] += scale * a2
    return bad


@numba.njit(cache=True)
def _near_dipole(pairs, tstart, tend, sstart, send, tpts, spts, c, b, y, scale, delta):
    for p in range(pairs.shape[0]):
        t = pairs[p, 0]
        s = pairs[p, 1]
        for i in range(tstart[t], tend[t]):
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            for j in range(sstart[s], send[s]):
                d0 = tpts[i, 0] - spts[j, 0]
                d1 = tpts[i, 1] - spts[j, 1]
                d2 = tpts[i, 2] - spts[j, 2]
                r2 = d0 * d0 + d1 * d1 + d2 * d2
                r = math.sqrt(r2)
                if r <= delta or r == 0.0:
                    continue
                ir3 = 1.0 / (r2 * r)
                bd = b[j, 0] * d0 + b[j, 1] * d1 + b[j, 2] * d2
                g = c[j] * ir3 - 3.0 * bd * ir3 / r2
                a0 += g * d0 + b[j, 0] * ir3
                a1 += g * d1 + b[j, 1] * ir3
                a2 += g * d2 + b[j, 2] * ir3
            y[i, 0] += scale * a0
            y[i, 1] += scale * a1
            y[i, 2] += scale * a2


@numba.njit(cache=True)
def _coupling_blocks(pairs, tgrid, sgrid, scale, delta, vector):
    n3 = tgrid.shape[1]
    nc = 3 if vector else 1
    out = np.zeros((pairs.shape[0], nc, n3, n3))
    capped = scale / delta if delta > 0.0 else 0.0
    for p in range(pairs.shape[0]):
        t = pairs[p, 0]
        s = pairs[p, 1]
        for a in range(n3):
            for b in range(n3):
                d0 = tgrid[t, a, 0] - sgrid[s, b, 0]
                d1 = tgrid[t, a, 1] - sgrid[s, b, 1]
                d2 = tgrid[t, a, 2] - sgrid[s, b, 2]
                r2 = d0 * d0 + d1 * d1 + d2 * d2
                r = math.sqrt(r2)
                if vector:
                    if r > delta:
                        f = scale / (r2 * r)
                        out[p, 0, a, b] = f * d0
                        out[p, 1, a, b] = f * d1
                        out[p, 2, a, b] = f * d2
                else:
                    out[p, 0, a, b] = capped if r <= delta else scale / r
    return out


@numba.njit(cache=True)
def _apply_coupling(pairs, blocks, xhat, yhat):
    nc = blocks.shape[1]
    n3 = blocks.shape[2]
    for p in range(pairs.shape[0]):
        t = pairs[p, 0]
        s = pairs[p, 1]
        for c in range(nc):
            for a in range(n3):
                acc = 0.0
                for b in range(n3):
                    acc += blocks[p, c, a, b] * xhat[s, b, 0]
                yhat[t, a, c] += acc


@numba.njit(cache=True)
def _apply_near_blocks(pairs, offsets, data, tstart, tend, sstart, send, x, y, nc):
    for p in range(pairs.shape[0]):
        t = pairs[p, 0]
        s = pairs[p, 1]
        o = offsets[p]
        m = send[s] - sstart[s]
        for i in range(tstart[t], tend[t]):
            for c in range(nc):
                acc = 0.0
                base = o + ((i - tstart[t]) * nc + c) * m
                for j in range(m):
                    acc += data[base + j] * x[sstart[s] + j]
                y[i, c] += acc


# --------------------------------------------------------------------------
# operator
# --------------------------------------------------------------------------

class H2Matrix:
    """H2 approximation of a point kernel between two point sets.

    Parameters
    ----------
    row_basis, col_basis : ClusterBasis
    kernel : LaplaceKernel or LaplaceGradientKernel
    blocks : BlockClusterTree, optional
        Built with default admissibility when omitted.
    mode : {"on-the-fly", "stored"}
        ``stored`` precomputes coupling matrices and dense nearfield blocks;
        ``on-the-fly`` evaluates every block inside the product and keeps
        nothing.
    exclude_diagonal : bool
        Skip ``i == j`` (same tree on both sides only).
    """

    def __init__(self, row_basis, col_basis, kernel, blocks=None, mode="on-the-fly",
                 exclude_diagonal=None, cfg=AdmissibilityConfig()):
        if mode not in ("on-the-fly", "stored"):
            raise ValueError(f"unknown H2 mode {mode!r}")
        self.row_basis = row_basis
        self.col_basis = col_basis
        self.kernel = kernel
        self.blocks = blocks if blocks is not None else build_block_tree(
            row_basis.tree, col_basis.tree, cfg)
        same = row_basis.tree is col_basis.tree
        if exclude_diagonal is None:
            exclude_diagonal = same
        if exclude_diagonal and not same:
            raise ValueError("diagonal exclusion needs identical row and column sets")
        self.exclude_diagonal = bool(exclude_diagonal)
        self.mode = mode
        self._coupling = None
        self._near = None
        self.last_regularized = 0
        if mode == "stored":
            self._store()

    @property
    def shape(self):
        return (self.row_basis.tree.n_points, self.col_basis.tree.n_points)

    @property
    def n_out(self):
        return self.kernel.n_out

    # ------------------------------------------------------------- storage
    def _store(self):
        rb, cb, k = self.row_basis, self.col_basis, self.kernel
        vec = k.n_out == 3
        self._coupling = _coupling_blocks(self.blocks.admissible, rb.grid, cb.grid,
                                          k.scale, k.delta, vec)
        rt, ct = rb.tree, cb.tree
        near = self.blocks.nearfield
        sizes = rt.sizes[near[:, 0]] * ct.sizes[near[:, 1]] * k.n_out
        offsets = np.zeros(len(near) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum(sizes)
        data = np.empty(offsets[-1])
        for p, (t, s) in enumerate(near):
            blk = dense_kernel_matrix(
                k, rt.points[rt.start[t]:rt.end[t]], ct.points[ct.start[s]:ct.end[s]],
                exclude_diagonal=self.exclude_diagonal and t == s)
            if not vec:
                blk = blk[:, None, :]
            else:
                blk = blk.transpose(0, 2, 1)
            data[offsets[p]:offsets[p + 1]] = blk.ravel()
        self._near = (offsets, data)

    def memory_footprint(self, mode=None):
        """Bytes needed by the stored representation (counted, not allocated)."""
        mode = mode or self.mode
        n3 = self.row_basis.n3
        floats = self.row_basis.n_floats()
        if self.col_basis is not self.row_basis:
            floats += self.col_basis.n_floats()
        if mode == "stored":
            floats += self.blocks.n_admissible * n3 * n3 * self.n_out
            floats += self.blocks.nearfield_entries() * self.n_out
        return 8 * floats

    # ------------------------------------------------------------- products
    def _check(self, x, n):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (n,):
            raise ValueError(f"dimension mismatch: expected vector of length {n}, got {x.shape}")
        return x

    def matvec(self, x, y=None, alpha=1.0):
        """``y <- y + alpha * A x`` in original index order.

        Returns an (n,) array for scalar kernels and (n, 3) for the
        gradient kernel.
        """
        nr, nc = self.shape
        x = self._check(x, nc)
        out_shape = (nr,) if self.n_out == 1 else (nr, 3)
        if y is None:
            y = np.zeros(out_shape)
        elif y.shape != out_shape:
            raise ValueError(f"dimension mismatch: output must have shape {out_shape}")
        rb, cb = self.row_basis, self.col_basis
        xs = np.ascontiguousarray(x[cb.tree.perm])
        ys = np.zeros((nr, self.n_out))
        self._apply(xs, ys)
        y[rb.tree.perm] += alpha * ys.reshape(y[rb.tree.perm].shape)
        return y

    def _apply(self, xs, ys):
        rb, cb, k = self.row_basis, self.col_basis, self.kernel
        rt, ct = rb.tree, cb.tree
        adm, near = self.blocks.admissible, self.blocks.nearfield
        xhat = cb.forward(xs)
        yhat = np.zeros((rt.n_nodes, rb.n3, self.n_out))
        if self.mode == "stored":
            _apply_coupling(adm, self._coupling, xhat, yhat)
            offsets, data = self._near
            _apply_near_blocks(near, offsets, data, rt.start, rt.end, ct.start, ct.end,
                               xs, ys, self.n_out)
        else:
            far = _far_scalar if self.n_out == 1 else _far_vector
            far(adm, rb.grid, cb.grid, xhat, yhat, k.scale, k.delta)
            nf = _near_scalar if self.n_out == 1 else _near_vector
            bad = nf(near, rt.start, rt.end, ct.start, ct.end, rt.points, ct.points,
                     xs, ys, k.scale, k.delta, self.exclude_diagonal)
            if self.n_out == 1:
                bad, self.last_regularized = bad
            if bad >= 0:
                raise CoincidentPointsError(
                    f"coincident points (row {int(rt.perm[bad])}) with delta = 0")
        rb.backward(yhat, ys)

    def rmatvec(self, x):
        """Transpose product ``A^T x`` (scalar kernels only, on-the-fly)."""
        if self.n_out != 1:
            raise ValueError("transpose product is only defined for scalar kernels")
        nr, nc = self.shape
        x = self._check(x, nr)
        rb, cb, k = self.row_basis, self.col_basis, self.kernel
        rt, ct = rb.tree, cb.tree
        xs = np.ascontiguousarray(x[rt.perm])
        ys = np.zeros((nc, 1))
        xhat = rb.forward(xs)
        yhat = np.zeros((ct.n_nodes, cb.n3, 1))
        adm = np.ascontiguousarray(self.blocks.admissible[:, ::-1])
        near = np.ascontiguousarray(self.blocks.nearfield[:, ::-1])
        _far_scalar(adm, cb.grid, rb.grid, xhat, yhat, k.scale, k.delta)
        bad, self.last_regularized = _near_scalar(
            near, ct.start, ct.end, rt.start, rt.end, ct.points, rt.points,
            xs, ys, k.scale, k.delta, self.exclude_diagonal)
        if bad >= 0:
            raise CoincidentPointsError("coincident points with delta = 0")
        cb.backward(yhat, ys)
        y = np.empty(nc)
        y[ct.perm] = ys[:, 0]
        return y

    def matvec_dipole(self, c, b):
        """Gradient kernel applied to charges ``c`` plus dipoles ``b`` at the columns.

        Returns ``scale * sum_j [c_j d/r^3 + b_j/r^3 - 3 (b_j . d) d/r^5]``
        with ``d = x_i - y_j``, an (n, 3) array in original order.
        """
        if self.n_out != 3:
            raise ValueError("dipole product needs the gradient kernel")
        rb, cb, k = self.row_basis, self.col_basis, self.kernel
        rt, ct = rb.tree, cb.tree
        nr, nc = self.shape
        cs = np.ascontiguousarray(np.asarray(c, dtype=np.float64)[ct.perm])
        bs = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(nc, 3)[ct.perm])
        xhat = cb.forward_dipole(cs, bs)
        yhat = np.zeros((rt.n_nodes, rb.n3, 3))
        _far_vector(self.blocks.admissible, rb.grid, cb.grid, xhat, yhat, k.scale, k.delta)
        ys = np.zeros((nr, 3))
        _near_dipole(self.blocks.nearfield, rt.start, rt.end, ct.start, ct.end,
                     rt.points, ct.points, cs, bs, ys, k.scale, k.delta)
        rb.backward(yhat, ys)
        y = np.empty((nr, 3))
        y[rt.perm] = ys
        return y

    def matvec_vector3(self, w):
        """Three field components ``F^(k) w`` as an (n, 3) array."""
        if self.n_out != 3:
            raise ValueError("matvec_vector3 needs the gradient kernel")
        return self.matvec(w)

    def to_dense(self):
        """Materialise the approximation column by column (small problems only)."""
        nr, nc = self.shape
        out = np.zeros((nr, nc) if self.n_out == 1 else (nr, nc, 3))
        e = np.zeros(nc)
        for j in range(nc):
            e[j] = 1.0
            out[:, j] = self.matvec(e)
            e[j] = 0.0
        return out


def assemble_h2(row_points, col_points, kernel, order=DEFAULT_ORDER, leaf_cap=DEFAULT_LEAF_CAP,
                cfg=AdmissibilityConfig(), mode="on-the-fly", exclude_diagonal=None):
    """Build trees, bases and the H2 operator for two point sets.

    Passing the same array object for rows and columns shares the tree and
    excludes the diagonal by default.
    """
    rtree = build_cluster_tree(row_points, leaf_cap)
    rb = ClusterBasis(rtree, order)
    if col_points is row_points:
        cbasis = rb
    else:
        cbasis = ClusterBasis(build_cluster_tree(col_points, leaf_cap), order)
    return H2Matrix(rb, cbasis, kernel, mode=mode, cfg=cfg, exclude_diagonal=exclude_diagonal)


@dataclass(frozen=True)
class H2Config:
    """Parameters of every H2 structure in a run."""

    order: int = DEFAULT_ORDER
    eta: float = 2.0
    leaf_cap: int = DEFAULT_LEAF_CAP
    delta: float = 1e-3
    mode: str = "on-the-fly"
    variant: str = "max"

    def __post_init__(self):
        if self.order < 1 or self.leaf_cap < 1:
            raise ValueError("order and leaf_cap must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.mode not in ("on-the-fly", "stored"):
            raise ValueError(f"unknown H2 mode {self.mode!r}")
        AdmissibilityConfig(self.eta, self.variant)

    @property
    def admissibility(self):
        return AdmissibilityConfig(self.eta, self.variant)
