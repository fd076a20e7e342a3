"""Quadrature rules on triangles and for pairs of triangles.

Reference triangle for single-triangle rules: (0,0), (1,0), (0,1) with
weights summing to 1 (multiply by the physical area).

Pair rules for coincident, edge-adjacent and vertex-adjacent triangles use
the relative-coordinate transforms of Sauter and Schwab on the reference
triangle {0 <= x2 <= x1 <= 1}, mapped by ``P0 + x1 (P1 - P0) + x2 (P2 - P1)``.
Shared vertices must come first in both local orderings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuadratureConfig",
    "gauss_legendre_01",
    "dunavant7",
    "collapsed_gauss",
    "sauter_schwab",
]


@dataclass(frozen=True)
class QuadratureConfig:
    """Quadrature orders for Galerkin assembly.

    regular_points : points of the symmetric rule for well separated pairs (7)
    near_order : Gauss points per direction of the collapsed rule used for
        disjoint pairs closer than ``near_factor`` times their diameter
    singular_order : Gauss points per dimension of the singular transforms
    """

    regular_points: int = 7
    near_order: int = 6
    near_factor: float = 2.0
    singular_order: int = 4

    def __post_init__(self):
        if self.regular_points not in (1, 3, 7):
            raise ValueError("regular rule must have 1, 3 or 7 points")
        if min(self.near_order, self.singular_order) < 1:
            raise ValueError("quadrature orders must be >= 1")

    def key(self):
        return f"r{self.regular_points}n{self.near_order}f{self.near_factor:g}s{self.singular_order}"


def gauss_legendre_01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def dunavant7():
    """Degree-5 symmetric 7-point rule; returns barycentric (7, 3) and weights."""
    a1, b1 = 0.059715871789770, 0.470142064105115
    a2, b2 = 0.797426985353087, 0.101286507323456
    w0, w1, w2 = 0.225, 0.132394152788506, 0.125939180544827
    bary = np.array([
        [1 / 3, 1 / 3, 1 / 3],
        [a1, b1, b1], [b1, a1, b1], [b1, b1, a1],
        [a2, b2, b2], [b2, a2, b2], [b2, b2, a2],
    ])
    w = np.array([w0, w1, w1, w1, w2, w2, w2])
    return bary, w


def regular_rule(n_points):
    if n_points == 7:
        return dunavant7()
    if n_points == 3:
        return np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]), np.full(3, 1 / 3)
    return np.array([[1 / 3, 1 / 3, 1 / 3]]), np.ones(1)


def collapsed_gauss(n):
    """Duffy-collapsed tensor Gauss rule with n*n points (barycentric, weights)."""
    x, w = gauss_legendre_01(n)
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    s = u.ravel()
    t = (v * (1.0 - u)).ravel()
    weights = (wu * wv * (1.0 - u)).ravel() * 2.0
    bary = np.stack([1.0 - s - t, s, t], axis=1)
    return bary, weights


def sauter_schwab(n):
    """Pair rules for the three singular configurations.

    Returns a dict mapping ``"identical"``, ``"edge"``, ``"vertex"`` to
    ``(xhat, yhat, w)`` with points on the reference triangle
    {0 <= x2 <= x1 <= 1}.  Weights integrate over reference x reference,
    so a constant integrand gives 1/4.
    """
    g, gw = gauss_legendre_01(n)
    X, E1, E2, E3 = np.meshgrid(g, g, g, g, indexing="ij")
    W = np.einsum("i,j,k,l->ijkl", gw, gw, gw, gw)
    xi, e1, e2, e3 = X.ravel(), E1.ravel(), E2.ravel(), E3.ravel()
    W = W.ravel()

    def pack(cases):
        xs = np.concatenate([c[0] for c in cases])
        ys = np.concatenate([c[1] for c in cases])
        ws = np.concatenate([c[2] for c in cases])
        return xs, ys, ws

    def P(a, b):
        return np.stack([a, b], axis=1)

    # identical triangles
    w = W * xi**3 * e1**2 * e2
    ident = pack([
        (P(xi, xi * (1 - e1 + e1 * e2)), P(xi * (1 - e1 * e2 * e3), xi * (1 - e1)), w),
        (P(xi * (1 - e1 * e2 * e3), xi * (1 - e1)), P(xi, xi * (1 - e1 + e1 * e2)), w),
        (P(xi, xi * e1 * (1 - e2 + e2 * e3)), P(xi * (1 - e1 * e2), xi * e1 * (1 - e2)), w),
        (P(xi * (1 - e1 * e2), xi * e1 * (1 - e2)), P(xi, xi * e1 * (1 - e2 + e2 * e3)), w),
        (P(xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), P(xi, xi * e1 * (1 - e2)), w),
        (P(xi, xi * e1 * (1 - e2)), P(xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), w),
    ])
    # common edge from (0,0) to (1,0)
    w1 = W * xi**3 * e1**2
    w2 = W * xi**3 * e1**2 * e2
    edge = pack([
        (P(xi, xi * e1 * e3), P(xi * (1 - e1 * e2), xi * e1 * (1 - e2)), w1),
        (P(xi, xi * e1), P(xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3)), w2),
        (P(xi * (1 - e1 * e2), xi * e1 * (1 - e2)), P(xi, xi * e1 * e2 * e3), w2),
        (P(xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3)), P(xi, xi * e1), w2),
        (P(xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), P(xi, xi * e1 * e2), w2),
    ])
    # common vertex at the origin
    w = W * xi**3 * e2
    vert = pack([
        (P(xi, xi * e1), P(xi * e2, xi * e2 * e3), w),
        (P(xi * e2, xi * e2 * e3), P(xi, xi * e1), w),
    ])
    return {"identical": ident, "edge": edge, "vertex": vert}


def ss_to_barycentric(p):
    """Barycentric coordinates of points on the reference triangle {x2<=x1}."""
    return np.stack([1.0 - p[:, 0], p[:, 0] - p[:, 1], p[:, 1]], axis=1)
