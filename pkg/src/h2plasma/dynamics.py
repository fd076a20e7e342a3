"""Particle state, pushers, absorption and diagnostics.

Positions, velocities and times are nondimensional (``L0``, ``v0``, ``t0``);
charges are in units of ``e`` and masses in units of ``m_e``.  The equation
of motion is ``x' = v, v' = (q/m) (E + v x B)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import SurfaceMesh, contains

log = logging.getLogger(__name__)

__all__ = [
    "Particles",
    "StepConfig",
    "Ball",
    "Cylinder",
    "init_uniform",
    "maxwellian",
    "step_leapfrog",
    "step_boris",
    "step",
    "absorb",
    "kinetic_energy",
    "dft",
    "spectrum",
    "dominant_nonzero_frequency",
    "region_counts",
    "radial_histogram",
    "gyro_period",
    "RejectionSamplingError",
]

MIN_ACCEPTANCE = 0.01


class RejectionSamplingError(RuntimeError):
    """Shape too thin for rejection sampling from its bounding box."""


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------

@dataclass
class Particles:
    """Structure-of-arrays particle set.

    ``ids`` holds the index at creation so absorption keeps a stable order
    that can be traced back.  ``absorbed_charge`` accumulates ``w q`` of
    removed particles.
    """

    x: np.ndarray
    v: np.ndarray
    q: np.ndarray
    m: np.ndarray
    w: np.ndarray
    ids: np.ndarray = None
    absorbed_charge: float = 0.0
    absorbed_count: int = 0

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64).reshape(-1, 3)
        n = len(self.x)
        self.v = np.ascontiguousarray(np.broadcast_to(self.v, (n, 3)), dtype=np.float64).copy()
        self.q = np.broadcast_to(np.asarray(self.q, dtype=np.float64), (n,)).copy()
        self.m = np.broadcast_to(np.asarray(self.m, dtype=np.float64), (n,)).copy()
        self.w = np.broadcast_to(np.asarray(self.w, dtype=np.float64), (n,)).copy()
        if self.ids is None:
            self.ids = np.arange(n)
        if n and (self.m.min() <= 0 or self.w.min() <= 0):
            raise ValueError("particle masses and weights must be positive")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.ones(0), np.ones(0))

    def __len__(self):
        return len(self.x)

    @property
    def wq(self):
        return self.w * self.q

    @property
    def qm(self):
        return self.q / self.m

    @property
    def total_charge(self):
        return float(self.wq.sum())

    def keep(self, mask):
        """Drop particles where ``mask`` is False (order preserved)."""
        gone = ~mask
        self.absorbed_charge += float(self.wq[gone].sum())
        self.absorbed_count += int(gone.sum())
        for name in ("x", "v", "q", "m", "w", "ids"):
            setattr(self, name, getattr(self, name)[mask])

    def copy(self):
        return Particles(self.x.copy(), self.v.copy(), self.q.copy(), self.m.copy(),
                         self.w.copy(), self.ids.copy(), self.absorbed_charge, self.absorbed_count)

    def as_table(self):
        """(n, 9) array with columns x, y, z, vx, vy, vz, q, m, w."""
        return np.column_stack([self.x, self.v, self.q, self.m, self.w])


@dataclass(frozen=True)
class StepConfig:
    dt: float
    pusher: str = "leapfrog"
    B: tuple = (0.0, 0.0, 0.0)
    background: bool = False
    absorption: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.pusher not in ("leapfrog", "boris"):
            raise ValueError(f"unknown pusher {self.pusher!r}")
        object.__setattr__(self, "B", tuple(float(b) for b in self.B))


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Ball:
    radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)

    @property
    def volume(self):
        return 4.0 / 3.0 * math.pi * self.radius**3

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius

    def contains(self, x):
        d = x - np.asarray(self.center)
        return np.einsum("ij,ij->i", d, d) <= self.radius**2


@dataclass(frozen=True)
class Cylinder:
    """Solid cylinder around ``center`` with its axis along ``axis``."""

    radius: float = 1.0
    height: float = 5.0
    center: tuple = (0.0, 0.0, 0.0)
    axis: str = "z"

    def __post_init__(self):
        if self.axis not in ("x", "y", "z"):
            raise ValueError(f"unknown axis {self.axis!r}")

    @property
    def volume(self):
        return math.pi * self.radius**2 * self.height

    @property
    def _ax(self):
        return "xyz".index(self.axis)

    def bounds(self):
        half = np.full(3, self.radius)
        half[self._ax] = 0.5 * self.height
        c = np.asarray(self.center, dtype=np.float64)
        return c - half, c + half

    def contains(self, x):
        d = x - np.asarray(self.center)
        a = self._ax
        r2 = np.einsum("ij,ij->i", d, d) - d[:, a] ** 2
        return (r2 <= self.radius**2) & (np.abs(d[:, a]) <= 0.5 * self.height)


class _MeshShape:
    def __init__(self, mesh):
        self.mesh = mesh
        self.volume = mesh.volume

    def bounds(self):
        return self.mesh.vertices.min(axis=0), self.mesh.vertices.max(axis=0)

    def contains(self, x):
        return contains(self.mesh, x)


def maxwellian(rng, n, temperature=1.0, bulk=(0.0, 0.0, 0.0)):
    """``bulk + sqrt(T) * standard normal`` per component."""
    return np.asarray(bulk, dtype=np.float64) + math.sqrt(temperature) * rng.standard_normal((n, 3))


def init_uniform(shape, n, velocity="zero", temperature=1.0, bulk=(0.0, 0.0, 0.0), q=-1.0,
                 m=1.0, rng=None, seed=None, batch=None):
    """Uniformly distributed particles inside ``shape`` by rejection sampling.

    Parameters
    ----------
    shape : SurfaceMesh, Ball or Cylinder
    n : int
        Number of particles, at least 1.
    velocity : {"zero", "maxwellian"}
    rng : numpy Generator, optional
        Defaults to ``PCG64(seed)``.

    Each particle gets weight ``|shape| / n``.
    """
    if n < 1:
        raise ValueError("need at least one particle")
    if velocity not in ("zero", "maxwellian"):
        raise ValueError(f"unknown velocity law {velocity!r}")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(seed))
    if isinstance(shape, SurfaceMesh):
        shape = _MeshShape(shape)
    lo, hi = shape.bounds()
    batch = batch or max(1024, 2 * n)
    chunks, have, drawn = [], 0, 0
    while have < n:
        cand = lo + (hi - lo) * rng.random((batch, 3))
        drawn += batch
        inside = cand[shape.contains(cand)]
        chunks.append(inside)
        have += len(inside)
        if have / drawn < MIN_ACCEPTANCE:
            raise RejectionSamplingError(f"rejection acceptance {have / drawn:.2%} below 1%")
    x = np.concatenate(chunks)[:n]
    if velocity == "zero":
        v = np.zeros((n, 3))
    else:
        v = maxwellian(rng, n, temperature, bulk)
    return Particles(x, v, q, m, shape.volume / n)


# --------------------------------------------------------------------------
# pushers
# --------------------------------------------------------------------------

def _field(field_callback, particles):
    E = np.asarray(field_callback(particles), dtype=np.float64)
    if E.shape != particles.x.shape:
        raise ValueError(f"field callback returned shape {E.shape}, expected {particles.x.shape}")
    return E


def step_leapfrog(particles, field_callback, dt, mesh=None):
    """Kick then drift: ``v += dt (q/m) E(x)``, ``x += dt v``.

    Particles outside ``mesh`` after the drift are absorbed when a mesh is
    given.  Returns the number removed.
    """
    if len(particles) == 0:
        return 0
    E = _field(field_callback, particles)
    particles.v += dt * particles.qm[:, None] * E
    particles.x += dt * particles.v
    return absorb(particles, mesh) if mesh is not None else 0


def _boris_velocity(v, E, qm, B, dt):
    h = 0.5 * dt * qm[:, None]
    vm = v + h * E
    t = h * np.asarray(B, dtype=np.float64)[None, :]
    s = 2.0 * t / (1.0 + np.einsum("ij,ij->i", t, t))[:, None]
    vp = vm + np.cross(vm + np.cross(vm, t), s)
    return vp + h * E


def step_boris(particles, field_callback, B, dt, mesh=None):
    """Boris push: half kick, magnetic rotation, half kick, drift."""
    if len(particles) == 0:
        return 0
    E = _field(field_callback, particles)
    particles.v = _boris_velocity(particles.v, E, particles.qm, B, dt)
    particles.x += dt * particles.v
    return absorb(particles, mesh) if mesh is not None else 0


def step(particles, field_callback, cfg, mesh=None):
    """One step with the pusher chosen by ``cfg``."""
    mesh = mesh if cfg.absorption else None
    if cfg.pusher == "boris":
        return step_boris(particles, field_callback, cfg.B, cfg.dt, mesh)
    return step_leapfrog(particles, field_callback, cfg.dt, mesh)


def absorb(particles, mesh):
    """Remove particles outside ``mesh``; returns the number removed."""
    if len(particles) == 0:
        return 0
    inside = contains(mesh, particles.x)
    removed = int((~inside).sum())
    if removed:
        particles.keep(inside)
    return removed


def gyro_period(q, m, B):
    return 2.0 * math.pi * m / abs(q * B)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def kinetic_energy(particles):
    return 0.5 * float(np.sum(particles.w * particles.m * np.einsum("ij,ij->i", particles.v, particles.v)))


def dft(series):
    """Discrete Fourier transform ``X_k = sum_j s_j exp(-2 pi i jk/n)``."""
    return np.fft.fft(np.asarray(series, dtype=np.float64))


def spectrum(series, dt_sample):
    """One-sided magnitude spectrum without the constant mode.

    Returns ``(freq, magnitude)`` for bins ``k = 1 .. n//2`` with ``freq``
    in cycles per unit time.
    """
    s = np.asarray(series, dtype=np.float64)
    if len(s) < 4:
        raise ValueError("spectrum needs at least 4 samples")
    X = dft(s)
    k = np.arange(1, len(s) // 2 + 1)
    return k / (len(s) * dt_sample), np.abs(X[k])


def dominant_nonzero_frequency(series, dt_sample):
    """Frequency (cycles per unit time) of the largest nonconstant mode."""
    freq, mag = spectrum(series, dt_sample)
    s = np.asarray(series, dtype=np.float64)
    if mag.max() <= 1e-12 * max(np.abs(s).sum(), 1e-300):
        raise ValueError("no nonzero mode")
    i = int(np.argmax(mag))
    return float(freq[i]), float(mag[i])


def region_counts(x, slabs):
    """Number of positions with z in each closed interval of ``slabs``."""
    z = np.asarray(x, dtype=np.float64).reshape(-1, 3)[:, 2]
    return np.array([int(np.count_nonzero((z >= lo) & (z <= hi))) for lo, hi in slabs], dtype=np.int64)


@dataclass
class RadialHistogram:
    edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray  # counts / (n * width), a pdf in r/R
    reference: np.ndarray  # bin average of 3 r^2
    centers: np.ndarray = field(default=None)

    def chi2_per_dof(self):
        n = self.counts.sum()
        expected = n * np.diff(self.edges**3)
        ok = expected > 0
        return float(np.sum((self.counts[ok] - expected[ok]) ** 2 / expected[ok]) / max(ok.sum() - 1, 1))


def radial_histogram(x, bins=20, radius=1.0, center=(0.0, 0.0, 0.0), total=None):
    """Histogram of ``|x - center| / radius`` over [0, 1] with the uniform-ball reference.

    ``density`` is normalised by ``total`` particles (default: the current
    count).  Passing the initial count compares the final state with the
    initial uniform density, so absorbed particles show up as a deficit.
    """
    r = np.linalg.norm(np.asarray(x, dtype=np.float64).reshape(-1, 3) - np.asarray(center), axis=1) / radius
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.minimum(r, 1.0), bins=edges)
    width = np.diff(edges)
    total = len(r) if total is None else total
    density = counts / (max(total, 1) * width)
    reference = np.diff(edges**3) / width
    return RadialHistogram(edges, counts, density, reference, 0.5 * (edges[1:] + edges[:-1]))
