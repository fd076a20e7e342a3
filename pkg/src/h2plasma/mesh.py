"""Closed surface triangulations: generation, file I/O, geometry and
point-in-domain queries.

Meshes are plain arrays wrapped in :class:`SurfaceMesh`.  Every generated or
loaded mesh is validated to be closed, consistently oriented and to have
outward normals, which the boundary element code relies on.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numba
import numpy as np

__all__ = [
    "SurfaceMesh",
    "MeshError",
    "MeshParseError",
    "MeshIndexError",
    "MeshNotClosedError",
    "DegenerateTriangleError",
    "MeshOrientationError",
    "BoundaryCondition",
    "generate_sphere",
    "generate_cylinder",
    "generate_revolution",
    "generate_accelerator",
    "load_mesh",
    "save_mesh",
    "contains",
    "triangle_geometry",
]

MAX_SPHERE_LEVEL = 8
FORMAT_TAG = "plasmesh 1"


class MeshError(ValueError):
    """Base class for mesh construction and validation failures."""


class MeshParseError(MeshError):
    """The mesh file does not follow the ``plasmesh 1`` format."""


class MeshIndexError(MeshError):
    """A triangle references a vertex that does not exist."""


class MeshNotClosedError(MeshError):
    """Some edge is not shared by exactly two oppositely oriented triangles."""


class DegenerateTriangleError(MeshError):
    """A triangle has zero area."""


class MeshOrientationError(MeshError):
    """Normals point inwards (negative enclosed volume)."""


class SurfaceMesh:
    """Closed, oriented surface triangulation with per-triangle region labels.

    Parameters
    ----------
    vertices : (nv, 3) array_like
    triangles : (nt, 3) array_like of int
        0-based vertex indices, counter-clockwise seen from outside.
    labels : (nt,) array_like of int, optional
        Region label per triangle, used to assign boundary conditions.
    validate : bool
        Run the closedness/orientation checks (default True).
    """

    def __init__(self, vertices, triangles, labels=None, validate=True):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if labels is None:
            lab = np.zeros(len(t), dtype=np.int64)
        else:
            lab = np.array(labels, dtype=np.int64).reshape(-1)
        if len(lab) != len(t):
            raise MeshError("one region label per triangle is required")
        for a in (v, t, lab):
            a.flags.writeable = False
        self.vertices = v
        self.triangles = t
        self.labels = lab
        if validate:
            self.validate()

    # ------------------------------------------------------------------ checks
    def validate(self):
        nv = len(self.vertices)
        t = self.triangles
        if len(t) == 0:
            raise MeshError("mesh has no triangles")
        if t.min() < 0 or t.max() >= nv:
            raise MeshIndexError("index out of range: triangle vertex index "
                                 f"must lie in [0, {nv})")
        scale = max(np.ptp(self.vertices, axis=0).max(), 1e-300)
        if np.any(self.areas <= 1e-14 * scale**2):
            k = int(np.argmin(self.areas))
            raise DegenerateTriangleError(f"triangle {k} is degenerate")
        self._check_closed()
        if self.signed_volume <= 0.0:
            raise MeshOrientationError("normals point inwards (signed volume "
                                       f"{self.signed_volume:.3e} <= 0)")

    def _check_closed(self):
        t = self.triangles
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        nv = len(self.vertices)
        key = directed[:, 0] * nv + directed[:, 1]
        rev = directed[:, 1] * nv + directed[:, 0]
        uniq, counts = np.unique(key, return_counts=True)
        if np.any(counts > 1):
            raise MeshNotClosedError("mesh not closed: an edge is used twice "
                                     "with the same orientation")
        # every directed edge must have its reverse
        if not np.all(np.isin(rev, uniq, assume_unique=False)):
            raise MeshNotClosedError("mesh not closed: an edge is used by "
                                     "only one triangle")

    # ---------------------------------------------------------------- geometry
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @cached_property
    def corners(self):
        """(nt, 3, 3) array of triangle corner coordinates."""
        c = self.vertices[self.triangles]
        c.flags.writeable = False
        return c

    @cached_property
    def _cross(self):
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def areas(self):
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def normals(self):
        return self._cross / (2.0 * self.areas[:, None])

    @cached_property
    def centroids(self):
        return self.corners.mean(axis=1)

    @cached_property
    def total_area(self):
        return float(self.areas.sum())

    @cached_property
    def signed_volume(self):
        c = self.corners
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    @property
    def volume(self):
        return self.signed_volume

    @cached_property
    def diameters(self):
        """Longest edge of every triangle."""
        c = self.corners
        e = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 1], c[:, 0] - c[:, 2]], axis=1)
        return np.linalg.norm(e, axis=2).max(axis=1)

    @cached_property
    def _edge_data(self):
        t = self.triangles
        nv = len(self.vertices)
        local = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1)  # edge opposite corner i
        lo = local.min(axis=2)
        hi = local.max(axis=2)
        key = (lo * nv + hi).ravel()
        uniq, inv = np.unique(key, return_inverse=True)
        edges = np.stack([uniq // nv, uniq % nv], axis=1)
        return edges, inv.reshape(-1, 3)

    @property
    def edges(self):
        """(ne, 2) sorted vertex pairs of the unique edges."""
        return self._edge_data[0]

    @property
    def triangle_edges(self):
        """(nt, 3) index of the edge opposite to each corner."""
        return self._edge_data[1]

    @cached_property
    def edge_midpoints(self):
        e = self.edges
        return 0.5 * (self.vertices[e[:, 0]] + self.vertices[e[:, 1]])

    @cached_property
    def vertex_triangle_counts(self):
        return np.bincount(self.triangles.ravel(), minlength=self.n_vertices)

    @cached_property
    def hash(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    @property
    def region_labels(self):
        return sorted(int(x) for x in np.unique(self.labels))

    def __eq__(self, other):
        if not isinstance(other, SurfaceMesh):
            return NotImplemented
        return (np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.triangles, other.triangles)
                and np.array_equal(self.labels, other.labels))

    __hash__ = None

    def __repr__(self):
        return (f"SurfaceMesh(n_vertices={self.n_vertices}, n_triangles={self.n_triangles}, "
                f"regions={self.region_labels})")

    # -------------------------------------------------------- inside/outside
    @cached_property
    def _ray_grid(self):
        return _RayGrid(self)

    def contains(self, points):
        return contains(self, points)

    def distance_to_boundary(self, points, k=8):
        """Unsigned distance from points to the surface.

        Exact point-triangle distance over the ``k`` triangles with nearest
        centroids, which is exact whenever the triangles are quasi-uniform.
        """
        from scipy.spatial import cKDTree

        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if len(pts) == 0:
            return np.zeros(0)
        k = min(k, self.n_triangles)
        tree = self.__dict__.get("_centroid_kdtree")
        if tree is None:
            tree = cKDTree(self.centroids)
            self.__dict__["_centroid_kdtree"] = tree
        _, idx = tree.query(pts, k=k)
        idx = np.atleast_2d(idx).reshape(len(pts), k)
        c = self.corners[idx]  # (n, k, 3, 3)
        d = _point_triangle_distance(np.repeat(pts[:, None, :], k, axis=1).reshape(-1, 3),
                                     c.reshape(-1, 3, 3))
        return d.reshape(len(pts), k).min(axis=1)


def _point_triangle_distance(p, tri):
    """Vectorised exact distance from points p (n,3) to triangles tri (n,3,3)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        closest = a + ab * v[:, None] + ac * w[:, None]
        # vertex and edge regions (Ericson, Real-Time Collision Detection)
        m = (d1 <= 0) & (d2 <= 0)
        closest[m] = a[m]
        m2 = (d3 >= 0) & (d4 <= d3)
        closest[m2] = b[m2]
        m3 = (d6 >= 0) & (d5 <= d6)
        closest[m3] = c[m3]
        e_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0) & ~(m | m2 | m3)
        t = d1 / (d1 - d3)
        closest[e_ab] = (a + ab * t[:, None])[e_ab]
        e_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0) & ~(m | m2 | m3 | e_ab)
        t = d2 / (d2 - d6)
        closest[e_ac] = (a + ac * t[:, None])[e_ac]
        e_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0) & ~(m | m2 | m3 | e_ab | e_ac)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        closest[e_bc] = (b + (c - b) * t[:, None])[e_bc]
    return np.linalg.norm(p - closest, axis=1)


# --------------------------------------------------------------------------
# boundary conditions
# --------------------------------------------------------------------------

def _field_zero(x, n):
    return np.zeros(len(x))


def _field_x3(x, n):
    return x[:, 2].copy()


def _field_dx3(x, n):
    return n[:, 2].copy()


ANALYTIC_FIELDS = {
    "zero": _field_zero,
    "x3": _field_x3,
    "normal_x3": _field_dx3,
}


@dataclass(frozen=True)
class RegionCondition:
    kind: str  # "dirichlet" or "neumann"
    value: object = 0.0  # float, name in ANALYTIC_FIELDS or callable f(points, normals)

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary condition kind {self.kind!r}")
        if isinstance(self.value, str) and self.value not in ANALYTIC_FIELDS:
            raise ValueError(f"unknown analytic boundary field {self.value!r}")

    def evaluate(self, points, normals):
        v = self.value
        if callable(v):
            return np.asarray(v(points, normals), dtype=np.float64)
        if isinstance(v, str):
            return ANALYTIC_FIELDS[v](points, normals)
        return np.full(len(points), float(v))


class BoundaryCondition:
    """Boundary condition table keyed by region label.

    >>> bc = BoundaryCondition({0: ("dirichlet", 0.0), 2: ("neumann", 0.0)})
    """

    def __init__(self, regions):
        self.regions = {}
        for label, cond in regions.items():
            if not isinstance(cond, RegionCondition):
                cond = RegionCondition(*cond) if isinstance(cond, tuple) else RegionCondition(**cond)
            self.regions[int(label)] = cond

    @classmethod
    def all_dirichlet(cls, mesh, value=0.0):
        return cls({lab: ("dirichlet", value) for lab in mesh.region_labels})

    def check(self, mesh, allow_pure_neumann=False):
        missing = set(mesh.region_labels) - set(self.regions)
        if missing:
            raise ValueError(f"no boundary condition for region labels {sorted(missing)}")
        if not allow_pure_neumann and not self.dirichlet_mask(mesh).any():
            raise ValueError("at least one Dirichlet region is required")

    def dirichlet_mask(self, mesh):
        """Boolean mask over triangles lying in the Dirichlet part."""
        d = [lab for lab, c in self.regions.items() if c.kind == "dirichlet"]
        return np.isin(mesh.labels, d)

    def is_pure_dirichlet(self, mesh):
        return bool(self.dirichlet_mask(mesh).all())

    def is_pure_neumann(self, mesh):
        return not self.dirichlet_mask(mesh).any()

    def dirichlet_nodal(self, mesh):
        """Dirichlet datum interpolated at the vertices touching Gamma_D.

        Vertices shared by regions with different data take the value of the
        region with the smallest label.
        """
        vals = np.zeros(mesh.n_vertices)
        normals = _vertex_normals(mesh)
        seen = np.zeros(mesh.n_vertices, dtype=bool)
        for lab in sorted(self.regions):
            c = self.regions[lab]
            if c.kind != "dirichlet":
                continue
            nodes = np.unique(mesh.triangles[mesh.labels == lab])
            nodes = nodes[~seen[nodes]]
            if len(nodes):
                vals[nodes] = c.evaluate(mesh.vertices[nodes], normals[nodes])
                seen[nodes] = True
        return vals

    def neumann_centroid(self, mesh):
        """Neumann datum sampled at triangle centroids (zero on Gamma_D)."""
        vals = np.zeros(mesh.n_triangles)
        for lab, c in self.regions.items():
            if c.kind != "neumann":
                continue
            m = mesh.labels == lab
            if m.any():
                vals[m] = c.evaluate(mesh.centroids[m], mesh.normals[m])
        return vals


def _vertex_normals(mesh):
    n = np.zeros((mesh.n_vertices, 3))
    w = mesh.normals * mesh.areas[:, None]
    for i in range(3):
        np.add.at(n, mesh.triangles[:, i], w)
    return n / np.linalg.norm(n, axis=1)[:, None]


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------

def _icosahedron():
    p = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array([
        [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
        [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
        [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v / np.linalg.norm(v, axis=1)[:, None], f


def generate_sphere(level=3, radius=1.0):
    """Icosphere: the icosahedron refined ``level`` times, projected to the sphere.

    The mesh has ``20 * 4**level`` triangles and label 0 everywhere.
    """
    level = int(level)
    if level < 0:
        raise ValueError("refinement level must be >= 0")
    if level > MAX_SPHERE_LEVEL:
        raise ValueError(f"refinement level {level} exceeds the memory guard "
                         f"({MAX_SPHERE_LEVEL})")
    v, f = _icosahedron()
    verts = list(v)
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            i = cache.get(key)
            if i is None:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                i = len(verts) - 1
                cache[key] = i
            return i

        new = np.empty((4 * len(f), 3), dtype=np.int64)
        for k, (a, b, c) in enumerate(f):
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new[4 * k:4 * k + 4] = [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = new
    return SurfaceMesh(radius * np.array(verts), f)


def _ring_count(rho, rho_max, resolution):
    if rho <= 1e-14 * max(rho_max, 1.0):
        return 1
    return max(3, int(round(resolution * rho / rho_max)))


def generate_revolution(profile, segment_labels, resolution, axis="z"):
    """Triangulate the surface of revolution of a closed profile polyline.

    Parameters
    ----------
    profile : sequence of (a, rho)
        Axial coordinate and radius, starting and ending on the axis
        (``rho == 0``).
    segment_labels : sequence of int
        Region label per profile segment (``len(profile) - 1`` entries).
    resolution : int
        Number of vertices on the ring of maximal radius; sets the target
        edge length ``2*pi*rho_max/resolution`` used everywhere.
    axis : {"x", "y", "z"}
    """
    prof = np.asarray(profile, dtype=np.float64)
    if len(segment_labels) != len(prof) - 1:
        raise ValueError("need one label per profile segment")
    if prof[0, 1] != 0.0 or prof[-1, 1] != 0.0:
        raise ValueError("profile must start and end on the axis")
    resolution = int(resolution)
    if resolution < 3:
        raise ValueError("resolution must be >= 3")
    rho_max = prof[:, 1].max()
    h = 2.0 * np.pi * rho_max / resolution

    # subdivide each profile segment
    pts, seg_of_gap = [prof[0]], []
    for s in range(len(prof) - 1):
        a, b = prof[s], prof[s + 1]
        n = max(1, int(round(np.linalg.norm(b - a) / h)))
        for k in range(1, n + 1):
            pts.append(a + (b - a) * k / n)
            seg_of_gap.append(segment_labels[s])
    pts = np.array(pts)

    rings, verts = [], []
    for j, (a, rho) in enumerate(pts):
        m = _ring_count(rho, rho_max, resolution)
        if m == 1:
            theta = np.zeros(1)
        else:
            theta = 2.0 * np.pi * (np.arange(m) + 0.5 * (j % 2)) / m
        start = len(verts)
        for th in theta:
            verts.append((a, rho * np.cos(th), rho * np.sin(th)))
        rings.append((start, theta))

    tris, labels = [], []
    for j in range(len(pts) - 1):
        (sa, ta), (sb, tb) = rings[j], rings[j + 1]
        ma, mb = len(ta), len(tb)
        lab = seg_of_gap[j]
        if ma == 1 and mb == 1:
            raise ValueError("profile segment lies on the axis")
        if ma == 1:
            for k in range(mb):
                tris.append((sa, sb + (k + 1) % mb, sb + k))
        elif mb == 1:
            for k in range(ma):
                tris.append((sa + k, sa + (k + 1) % ma, sb))
        else:
            i = k = 0
            while i < ma or k < mb:
                na = ta[(i + 1) % ma] + 2.0 * np.pi * ((i + 1) // ma)
                nb = tb[(k + 1) % mb] + 2.0 * np.pi * ((k + 1) // mb)
                if k == mb or (i < ma and na <= nb):
                    tris.append((sa + i % ma, sa + (i + 1) % ma, sb + k % mb))
                    i += 1
                else:
                    tris.append((sa + i % ma, sb + (k + 1) % mb, sb + k % mb))
                    k += 1
        labels.extend([lab] * (len(tris) - len(labels)))

    verts = np.array(verts)
    order = {"x": [0, 1, 2], "y": [2, 0, 1], "z": [1, 2, 0]}[axis]
    verts = verts[:, order]
    tris = np.array(tris, dtype=np.int64)
    mesh = SurfaceMesh(verts, tris, labels, validate=False)
    if mesh.signed_volume < 0:
        tris = tris[:, [0, 2, 1]]
    return SurfaceMesh(verts, tris, labels)


CYLINDER_BOTTOM, CYLINDER_TOP, CYLINDER_LATERAL = 0, 1, 2


def generate_cylinder(radius=1.0, height=5.0, resolution=33):
    """Closed cylinder centred at the origin with axis along z.

    Region labels: 0 bottom base, 1 top base, 2 lateral surface.
    ``resolution`` is the number of vertices around the circumference;
    ``radius=1, height=5, resolution=33`` gives about 2 000 triangles.
    """
    if radius <= 0 or height <= 0:
        raise ValueError("radius and height must be positive")
    if int(resolution) < 3:
        raise ValueError("resolution must be >= 3")
    z0, z1 = -0.5 * height, 0.5 * height
    profile = [(z0, 0.0), (z0, radius), (z1, radius), (z1, 0.0)]
    return generate_revolution(profile, [CYLINDER_BOTTOM, CYLINDER_LATERAL, CYLINDER_TOP],
                               resolution, axis="z")


ACCELERATOR_WALL, ACCELERATOR_SCREEN, ACCELERATOR_GRID = 0, 1, 2


def generate_accelerator(resolution=40):
    """Reconstructed two-stage accelerator, rotationally symmetric about x.

    A tube of radius 1 from x=-3 to x=3 with two annular electrodes
    (aperture radius 0.3): the screen near x=-1.1 (label 1) and the
    accelerating grid near x=0.9 (label 2).  Walls and end caps carry
    label 0.  This is a parametric stand-in for a published profile, not a
    reproduction of an exact mesh.
    """
    W, S, G = ACCELERATOR_WALL, ACCELERATOR_SCREEN, ACCELERATOR_GRID
    profile = [(-3.0, 0.0), (-3.0, 1.0), (-1.2, 1.0), (-1.2, 0.3), (-1.0, 0.3),
               (-1.0, 1.0), (0.8, 1.0), (0.8, 0.3), (1.0, 0.3), (1.0, 1.0),
               (3.0, 1.0), (3.0, 0.0)]
    labels = [W, W, S, S, S, W, G, G, G, W, W]
    return generate_revolution(profile, labels, resolution, axis="x")


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

def save_mesh(mesh, path):
    """Write ``mesh`` in the ASCII ``plasmesh 1`` format (17 significant digits)."""
    lines = [FORMAT_TAG, f"{mesh.n_vertices} {mesh.n_triangles}"]
    lines += ["%.17g %.17g %.17g" % tuple(p) for p in mesh.vertices]
    lines += ["%d %d %d %d" % (a, b, c, lab) for (a, b, c), lab in zip(mesh.triangles, mesh.labels)]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def load_mesh(path):
    """Read and validate a ``plasmesh 1`` file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc.strerror}") from None
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines or lines[0].strip() != FORMAT_TAG:
        raise MeshParseError(f"malformed header: expected {FORMAT_TAG!r}")
    try:
        nv, nt = (int(x) for x in lines[1].split())
    except (IndexError, ValueError):
        raise MeshParseError("malformed header: expected '<nv> <nt>' on line 2") from None
    if nv < 0 or nt < 0 or len(lines) < 2 + nv + nt:
        raise MeshParseError("file shorter than announced in the header")
    try:
        v = np.array([[float(x) for x in ln.split()] for ln in lines[2:2 + nv]])
        t = np.array([[int(x) for x in ln.split()] for ln in lines[2 + nv:2 + nv + nt]])
    except ValueError as exc:
        raise MeshParseError(f"malformed record: {exc}") from None
    if v.shape != (nv, 3) or t.shape != (nt, 4):
        raise MeshParseError("vertex lines need 3 fields, triangle lines 4 fields")
    return SurfaceMesh(v, t[:, :3], t[:, 3])


# --------------------------------------------------------------------------
# geometric queries
# --------------------------------------------------------------------------

def triangle_geometry(mesh, k):
    """Area, outward unit normal, centroid and (3, 3) edge midpoints of triangle k."""
    c = mesh.corners[k]
    mids = 0.5 * (c[[1, 2, 0]] + c[[2, 0, 1]])
    return float(mesh.areas[k]), mesh.normals[k].copy(), mesh.centroids[k].copy(), mids


_RAY = np.array([0.8724, 0.3821, 0.3047])
_RAY /= np.linalg.norm(_RAY)
_PERTURB = np.array([0.3141, -0.2718, 0.1414]) * 1e-9
PLANE_TOL = 1e-12


class _RayGrid:
    """Uniform 2D bucket grid of triangles projected along the fixed ray."""

    def __init__(self, mesh):
        r = _RAY
        u = np.cross(r, [0.0, 0.0, 1.0])
        u /= np.linalg.norm(u)
        w = np.cross(r, u)
        self.frame = np.stack([u, w, r])
        pv = mesh.vertices @ self.frame.T  # (nv, 3): u, w, r coordinates
        c2 = pv[mesh.triangles][:, :, :2]  # (nt, 3, 2)
        lo = c2.min(axis=1)
        hi = c2.max(axis=1)
        glo = lo.min(axis=0) - 1e-9
        ghi = hi.max(axis=0) + 1e-9
        g = max(1, int(np.sqrt(mesh.n_triangles)))
        cell = (ghi - glo) / g
        i0 = np.floor((lo - glo) / cell).astype(np.int64).clip(0, g - 1)
        i1 = np.floor((hi - glo) / cell).astype(np.int64).clip(0, g - 1)
        buckets = [[] for _ in range(g * g)]
        for k in range(mesh.n_triangles):
            for a in range(i0[k, 0], i1[k, 0] + 1):
                for b in range(i0[k, 1], i1[k, 1] + 1):
                    buckets[a * g + b].append(k)
        self.start = np.zeros(g * g + 1, dtype=np.int64)
        self.start[1:] = np.cumsum([len(b) for b in buckets])
        self.items = np.array([k for b in buckets for k in b], dtype=np.int64)
        self.g = g
        self.glo = glo
        self.cell = cell
        self.corners = mesh.corners
        self.normals = mesh.normals
        self.bbox_lo = mesh.vertices.min(axis=0)
        self.bbox_hi = mesh.vertices.max(axis=0)

    def count(self, pts):
        loc = pts @ self.frame.T
        return _ray_parity(pts, loc[:, 0], loc[:, 1], self.frame, self.glo, self.cell, self.g,
                           self.start, self.items, np.ascontiguousarray(self.corners),
                           np.ascontiguousarray(self.normals), PLANE_TOL)


@numba.njit(cache=True)
def _ray_parity(pts, pu, pw, frame, glo, cell, g, start, items, corners, normals, tol):
    n = pts.shape[0]
    inside = np.zeros(n, dtype=np.bool_)
    flagged = np.zeros(n, dtype=np.bool_)
    r0, r1, r2 = frame[2, 0], frame[2, 1], frame[2, 2]
    for i in range(n):
        a = int(np.floor((pu[i] - glo[0]) / cell[0]))
        b = int(np.floor((pw[i] - glo[1]) / cell[1]))
        if a < 0 or b < 0 or a >= g or b >= g:
            continue
        c = a * g + b
        hits = 0
        for q in range(start[c], start[c + 1]):
            k = items[q]
            nx, ny, nz = normals[k, 0], normals[k, 1], normals[k, 2]
            ndr = nx * r0 + ny * r1 + nz * r2
            # signed distance of the point to the triangle plane
            dist = (nx * (pts[i, 0] - corners[k, 0, 0]) + ny * (pts[i, 1] - corners[k, 0, 1])
                    + nz * (pts[i, 2] - corners[k, 0, 2]))
            if ndr == 0.0:
                continue
            s = -dist / ndr
            hx = pts[i, 0] + s * r0
            hy = pts[i, 1] + s * r1
            hz = pts[i, 2] + s * r2
            # barycentric inside test of the hit point
            inside_tri = True
            for e in range(3):
                p0 = corners[k, e]
                p1 = corners[k, (e + 1) % 3]
                ex, ey, ez = p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]
                qx, qy, qz = hx - p0[0], hy - p0[1], hz - p0[2]
                cx = ey * qz - ez * qy
                cy = ez * qx - ex * qz
                cz = ex * qy - ey * qx
                if cx * nx + cy * ny + cz * nz < 0.0:
                    inside_tri = False
                    break
            if not inside_tri:
                continue
            if abs(dist) < tol:
                flagged[i] = True
            if s > 0.0:
                hits += 1
        inside[i] = (hits % 2) == 1
    return inside, flagged


def contains(mesh, points):
    """Ray-casting parity test for points against a closed mesh.

    Accepts a single point (returns bool) or an (n, 3) array (returns a
    boolean array).  Points closer than 1e-12 to the plane of a triangle
    they project onto are shifted by a fixed 1e-9 offset and re-tested.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    pts = np.ascontiguousarray(np.atleast_2d(p))
    grid = mesh._ray_grid
    out = np.zeros(len(pts), dtype=bool)
    box = np.all((pts >= grid.bbox_lo) & (pts <= grid.bbox_hi), axis=1)
    idx = np.nonzero(box)[0]
    sub = pts[idx]
    for _ in range(4):
        inside, flagged = grid.count(sub)
        out[idx] = inside
        if not flagged.any():
            break
        idx = idx[flagged]
        sub = sub[flagged] + _PERTURB
    return bool(out[0]) if single else out
