"""Geometric cluster trees and block cluster trees.

Trees are stored as flat arrays in pre-order.  Node ``k`` owns the slice
``perm[start[k]:end[k]]`` of original point indices; ``points`` holds the
coordinates already permuted into tree order so leaves are contiguous.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AdmissibilityConfig",
    "ClusterTree",
    "BlockClusterTree",
    "build_cluster_tree",
    "build_block_tree",
    "is_admissible",
    "box_diameter",
    "box_distance",
]

DEFAULT_ETA = 2.0
DEFAULT_ORDER = 5
DEFAULT_LEAF_CAP = 2 * DEFAULT_ORDER**3
VARIANTS = ("first-variable", "second-variable", "min", "max")


@dataclass(frozen=True)
class AdmissibilityConfig:
    eta: float = DEFAULT_ETA
    variant: str = "max"

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown admissibility variant {self.variant!r}")


def box_diameter(lo, hi):
    """Diagonal length of axis-aligned boxes (vectorised over leading axes)."""
    return np.sqrt(np.sum((np.asarray(hi) - np.asarray(lo)) ** 2, axis=-1))


def box_distance(lo_a, hi_a, lo_b, hi_b):
    """Euclidean distance between axis-aligned boxes (0 if they overlap)."""
    gap = np.maximum(0.0, np.maximum(np.asarray(lo_a) - hi_b, np.asarray(lo_b) - hi_a))
    return np.sqrt(np.sum(gap**2, axis=-1))


def _admissible(da, db, dist, cfg):
    if cfg.variant == "max":
        d = np.maximum(da, db)
    elif cfg.variant == "min":
        d = np.minimum(da, db)
    elif cfg.variant == "first-variable":
        d = da
    else:
        d = db
    return (d <= cfg.eta * dist) & (dist > 0)


def is_admissible(box_a, box_b, cfg=AdmissibilityConfig()):
    """Test eta-admissibility of two boxes given as ``(lo, hi)`` pairs."""
    (lo_a, hi_a), (lo_b, hi_b) = box_a, box_b
    dist = box_distance(lo_a, hi_a, lo_b, hi_b)
    return bool(_admissible(box_diameter(lo_a, hi_a), box_diameter(lo_b, hi_b), dist, cfg))


@dataclass
class ClusterTree:
    """Pre-order array representation of a binary geometric cluster tree."""

    points: np.ndarray  # (n, 3) coordinates in tree order
    perm: np.ndarray  # tree position -> original index
    start: np.ndarray
    end: np.ndarray
    lo: np.ndarray  # (n_nodes, 3) bounding boxes
    hi: np.ndarray
    children: np.ndarray  # (n_nodes, 2), -1 for leaves
    parent: np.ndarray
    level: np.ndarray
    leaf_cap: int

    @property
    def n_points(self):
        return len(self.perm)

    @property
    def n_nodes(self):
        return len(self.start)

    @property
    def is_leaf(self):
        return self.children[:, 0] < 0

    @property
    def leaves(self):
        return np.nonzero(self.is_leaf)[0]

    @property
    def depth(self):
        return int(self.level.max())

    @property
    def sizes(self):
        return self.end - self.start

    @property
    def diameters(self):
        return box_diameter(self.lo, self.hi)

    def leaf_of_point(self):
        """Leaf node index for every tree position."""
        out = np.empty(self.n_points, dtype=np.int64)
        for k in self.leaves:
            out[self.start[k]:self.end[k]] = k
        return out

    def to_tree_order(self, x):
        return np.asarray(x)[self.perm]

    def from_tree_order(self, y):
        out = np.empty_like(y)
        out[self.perm] = y
        return out

    def stats(self):
        return {
            "n_points": int(self.n_points),
            "n_nodes": int(self.n_nodes),
            "depth": self.depth,
            "leaf_count": int(self.is_leaf.sum()),
            "max_leaf_size": int(self.sizes[self.is_leaf].max()),
        }


def build_cluster_tree(points, leaf_cap=DEFAULT_LEAF_CAP, extents=None):
    """Recursive longest-axis midpoint bisection with a median fallback.

    Parameters
    ----------
    points : (n, 3) array_like
    leaf_cap : int
        Nodes with at most this many points become leaves.
    extents : (n, 2, 3) array_like, optional
        Per-point bounding boxes (lo, hi) of basis function supports.  When
        given, node boxes enclose the supports instead of the points, which
        is what admissibility of Galerkin blocks needs.  Splitting still uses
        the points.
    """
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    n = len(pts)
    if n == 0:
        raise ValueError("cannot build a cluster tree over an empty point set")
    leaf_cap = int(leaf_cap)
    if leaf_cap < 1:
        raise ValueError("leaf_cap must be >= 1")
    if extents is not None:
        ext = np.asarray(extents, dtype=np.float64)
        elo, ehi = ext[:, 0], ext[:, 1]
    perm = np.arange(n)
    start, end, lo, hi, children, parent, level = [], [], [], [], [], [], []

    # explicit stack gives pre-order with the left child first
    stack = [(0, n, -1, 0)]
    while stack:
        s, e, par, lev = stack.pop()
        k = len(start)
        idx = perm[s:e]
        p = pts[idx]
        plo, phi = p.min(axis=0), p.max(axis=0)
        if extents is None:
            lo.append(plo)
            hi.append(phi)
        else:
            lo.append(elo[idx].min(axis=0))
            hi.append(ehi[idx].max(axis=0))
        start.append(s)
        end.append(e)
        parent.append(par)
        level.append(lev)
        children.append([-1, -1])
        if par >= 0:
            slot = 0 if children[par][0] < 0 else 1
            children[par][slot] = k
        if e - s <= leaf_cap:
            continue
        ext_ = phi - plo
        axis = int(np.argmax(ext_))
        mid = 0.5 * (plo[axis] + phi[axis])
        left = p[:, axis] <= mid
        nl = int(left.sum())
        if nl == 0 or nl == e - s:
            order = np.argsort(p[:, axis], kind="stable")
            nl = (e - s) // 2
            new = idx[order]
        else:
            new = np.concatenate([idx[left], idx[~left]])
        perm[s:e] = new
        stack.append((s + nl, e, k, lev + 1))
        stack.append((s, s + nl, k, lev + 1))

    return ClusterTree(
        points=np.ascontiguousarray(pts[perm]),
        perm=perm,
        start=np.array(start, dtype=np.int64),
        end=np.array(end, dtype=np.int64),
        lo=np.array(lo),
        hi=np.array(hi),
        children=np.array(children, dtype=np.int64),
        parent=np.array(parent, dtype=np.int64),
        level=np.array(level, dtype=np.int64),
        leaf_cap=leaf_cap,
    )


@dataclass
class BlockClusterTree:
    row: ClusterTree
    col: ClusterTree
    cfg: AdmissibilityConfig
    admissible: np.ndarray  # (n_adm, 2) pairs (row node, col node)
    nearfield: np.ndarray  # (n_near, 2)
    stats_: dict = field(default_factory=dict)

    @property
    def n_admissible(self):
        return len(self.admissible)

    @property
    def n_nearfield(self):
        return len(self.nearfield)

    def nearfield_entries(self):
        r, c = self.nearfield[:, 0], self.nearfield[:, 1]
        return int(np.sum(self.row.sizes[r] * self.col.sizes[c]))

    def admissible_entries(self):
        r, c = self.admissible[:, 0], self.admissible[:, 1]
        return int(np.sum(self.row.sizes[r] * self.col.sizes[c]))

    def stats(self):
        total = self.row.n_points * self.col.n_points
        return {
            "admissible_blocks": self.n_admissible,
            "nearfield_blocks": self.n_nearfield,
            "nearfield_fraction": self.nearfield_entries() / total,
            "row_tree": self.row.stats(),
            "col_tree": self.col.stats(),
        }


def build_block_tree(row_tree, col_tree, cfg=AdmissibilityConfig()):
    """Simultaneous descent producing admissible and nearfield leaf blocks.

    Pairs are processed level by level; within a level the order is the
    order of generation, so the result is deterministic.
    """
    rt, ct = row_tree, col_tree
    rdiam, cdiam = rt.diameters, ct.diameters
    r_leaf, c_leaf = rt.is_leaf, ct.is_leaf
    cur = np.zeros((1, 2), dtype=np.int64)
    adm, near = [], []
    while len(cur):
        a, b = cur[:, 0], cur[:, 1]
        dist = box_distance(rt.lo[a], rt.hi[a], ct.lo[b], ct.hi[b])
        ok = _admissible(rdiam[a], cdiam[b], dist, cfg)
        adm.append(cur[ok])
        rest = cur[~ok]
        a, b = rest[:, 0], rest[:, 1]
        stop = r_leaf[a] | c_leaf[b]
        near.append(rest[stop])
        rest = rest[~stop]
        if len(rest) == 0:
            break
        ra = rt.children[rest[:, 0]]
        cb = ct.children[rest[:, 1]]
        cur = np.stack([np.repeat(ra, 2, axis=1).ravel(), np.tile(cb, (1, 2)).ravel()], axis=1)
    empty = np.zeros((0, 2), dtype=np.int64)
    return BlockClusterTree(
        row=rt, col=ct, cfg=cfg,
        admissible=np.concatenate(adm) if adm else empty,
        nearfield=np.concatenate(near) if near else empty,
    )
