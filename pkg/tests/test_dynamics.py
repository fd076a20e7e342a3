import math

import numpy as np
import pytest

from h2plasma.dynamics import (Ball, Cylinder, Particles, RejectionSamplingError, StepConfig, absorb,
                               dft, dominant_nonzero_frequency, gyro_period, init_uniform,
                               kinetic_energy, radial_histogram, region_counts, spectrum, step,
                               step_boris, step_leapfrog)
from h2plasma.field import background_field
from h2plasma.h2 import LaplaceGradientKernel, assemble_h2


def _one(x=(0, 0, 0), v=(0, 0, 0), q=-1.0, m=1.0):
    return Particles(np.array([x], float), np.array([v], float), q, m, 1.0)


# ---------------------------------------------------------------- state and init

def test_particle_validation():
    with pytest.raises(ValueError):
        Particles(np.zeros((1, 3)), 0, -1, 0.0, 1.0)
    with pytest.raises(ValueError):
        Particles(np.zeros((1, 3)), 0, -1, 1.0, -1.0)
    assert len(Particles.empty()) == 0
    with pytest.raises(ValueError):
        StepConfig(dt=0)


def test_init_zero_velocity_and_weight():
    p = init_uniform(Ball(1.0), 500, seed=1)
    assert np.all(p.v == 0)
    assert np.all(p.w == 4 / 3 * math.pi / 500)
    c = Cylinder(0.5, 2.0, axis="x")
    p = init_uniform(c, 300, seed=1)
    assert np.all(p.w == math.pi * 0.25 * 2.0 / 300)
    assert np.all(np.abs(p.x[:, 0]) <= 1.0) and np.all(p.x[:, 1] ** 2 + p.x[:, 2] ** 2 <= 0.25)


def test_init_maxwellian_variance():
    p = init_uniform(Ball(1.0), 100_000, velocity="maxwellian", temperature=1.0, seed=3)
    var = p.v.var(axis=0)
    assert np.all((var >= 0.98) & (var <= 1.02))
    p = init_uniform(Ball(1.0), 20_000, velocity="maxwellian", bulk=(10, 0, 0), seed=3)
    assert p.v[:, 0].mean() == pytest.approx(10, abs=0.05)


def test_init_uniform_ball_mean_radius():
    p = init_uniform(Ball(1.0), 100_000, seed=4)
    r = np.linalg.norm(p.x, axis=1)
    assert 0.745 <= r.mean() <= 0.755


def test_init_on_mesh(sphere2):
    p = init_uniform(sphere2, 2000, seed=5)
    assert len(p) == 2000
    assert np.all(np.linalg.norm(p.x, axis=1) < 1.0)
    assert p.w[0] == pytest.approx(sphere2.volume / 2000, rel=1e-14)


def test_init_reproducible_and_errors():
    a = init_uniform(Ball(1.0), 100, velocity="maxwellian", seed=9)
    b = init_uniform(Ball(1.0), 100, velocity="maxwellian", seed=9)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v)
    with pytest.raises(ValueError):
        init_uniform(Ball(1.0), 0)

    class Sliver:
        volume = 1e-9

        def bounds(self):
            return np.zeros(3), np.ones(3)

        def contains(self, x):
            return x[:, 0] < 1e-4

    with pytest.raises(RejectionSamplingError):
        init_uniform(Sliver(), 10, seed=0)


# ---------------------------------------------------------------- pushers

def test_leapfrog_free_flight():
    p = _one(v=(1.0, -2.0, 0.5))
    step_leapfrog(p, lambda s: np.zeros_like(s.x), 0.1)
    np.testing.assert_allclose(p.x[0], [0.1, -0.2, 0.05], rtol=1e-15)


def test_leapfrog_uniform_field_from_rest():
    p = _one(q=-1.0, m=2.0)
    E = np.array([0.3, 0.0, -1.0])
    step_leapfrog(p, lambda s: np.tile(E, (len(s), 1)), 0.01)
    assert np.array_equal(p.v[0], 0.01 * (-1.0 / 2.0) * E)


def test_leapfrog_energy_background_oscillator():
    beta = 0.25
    p = Particles(np.array([[0.3, -0.1, 0.2], [0.0, 0.5, 0.0]]), np.array([[0, 0.1, 0], [0.2, 0, 0]]),
                  -1.0, 1.0, 1.0)
    cb = lambda s: background_field(s.x, beta)

    def energy(s):
        # q = -1 in E = x/(3 beta): potential x^2/(6 beta)
        return kinetic_energy(s) + np.sum(np.einsum("ij,ij->i", s.x, s.x)) / (6 * beta)

    e0 = energy(p)
    worst = 0.0
    for _ in range(10_000):
        step_leapfrog(p, cb, 1e-3)
        worst = max(worst, abs(energy(p) - e0) / e0)
    assert worst <= 0.01


def test_leapfrog_time_reversible(rng):
    p = Particles(rng.standard_normal((20, 3)), rng.standard_normal((20, 3)), -1.0, 1.0, 1.0)
    start = p.copy()
    E = rng.standard_normal((20, 3))
    frozen = lambda s: E
    n, dt = 50, 1e-2
    for _ in range(n):
        step_leapfrog(p, frozen, dt)
    # kick-drift reversed: shift by one kick, flip velocities, step back, shift and flip again
    p.v += dt * p.qm[:, None] * E
    p.v *= -1
    for _ in range(n):
        step_leapfrog(p, frozen, dt)
    p.v += dt * p.qm[:, None] * E
    p.v *= -1
    assert np.abs(p.x - start.x).max() <= 1e-12
    assert np.abs(p.v - start.v).max() <= 1e-12


def test_boris_reduces_to_leapfrog(rng):
    a = Particles(rng.standard_normal((30, 3)), rng.standard_normal((30, 3)), -1.0, 1.0, 1.0)
    b = a.copy()
    E = rng.standard_normal((30, 3))
    step_leapfrog(a, lambda s: E, 1e-2)
    step_boris(b, lambda s: E, (0.0, 0.0, 0.0), 1e-2)
    assert np.abs(a.x - b.x).max() <= 1e-15 * 10
    assert np.abs(a.v - b.v).max() <= 1e-15 * 10


def test_boris_speed_invariance(rng):
    p = Particles(np.zeros((10, 3)), rng.standard_normal((10, 3)), -1.0, 1.0, 1.0)
    speed = np.linalg.norm(p.v, axis=1)
    for _ in range(100):
        step_boris(p, lambda s: np.zeros_like(s.x), (0.3, -1.0, 2.0), 0.05)
        assert np.abs(np.linalg.norm(p.v, axis=1) / speed - 1).max() <= 1e-12


def test_boris_gyro_period():
    B = 2.0
    T = gyro_period(-1.0, 1.0, B)
    dt = T / 100
    p = _one(v=(1.0, 0.0, 0.0))
    vx = [p.v[0, 0]]
    for _ in range(1000):
        step_boris(p, lambda s: np.zeros_like(s.x), (0, 0, B), dt)
        vx.append(p.v[0, 0])
    vx = np.array(vx)
    # upward zero crossings of vx, linearly interpolated
    idx = np.nonzero((vx[:-1] < 0) & (vx[1:] >= 0))[0]
    t = (idx + (-vx[idx]) / (vx[idx + 1] - vx[idx])) * dt
    measured = np.diff(t).mean()
    assert measured == pytest.approx(T, rel=0.005)


def test_momentum_conserved_pair():
    x = np.array([[0.1, 0.0, 0.0], [-0.2, 0.3, 0.1]])
    p = Particles(x, np.array([[0.0, 0.1, 0.0], [0.1, 0.0, 0.0]]), -1.0, 1.0, 0.5)
    kern = LaplaceGradientKernel(1 / (4 * math.pi * 0.01), 1e-3)

    def cb(s):
        return assemble_h2(s.x, s.x, kern).matvec(s.wq)

    mom0 = (p.m * p.w)[:, None] * p.v
    for _ in range(100):
        step_leapfrog(p, cb, 1e-3)
    mom = (p.m * p.w)[:, None] * p.v
    assert np.abs(mom.sum(axis=0) - mom0.sum(axis=0)).max() <= 1e-12 * np.abs(mom).max()


def test_step_dispatch(sphere2):
    p = _one(x=(0.95, 0, 0), v=(10.0, 0, 0))
    q = p.copy()
    zero = lambda s: np.zeros_like(s.x)
    assert step(p, zero, StepConfig(dt=0.1), sphere2) == 1
    assert step(q, zero, StepConfig(dt=0.1, absorption=False), sphere2) == 0
    r = _one(v=(1.0, 0, 0))
    step(r, zero, StepConfig(dt=0.1, pusher="boris", B=(0, 0, 1.0)))
    assert r.v[0, 1] != 0


def test_callback_shape_checked():
    with pytest.raises(ValueError):
        step_leapfrog(_one(), lambda s: np.zeros(3), 0.1)


# ---------------------------------------------------------------- absorption

def test_absorb(sphere2):
    x = np.array([[0, 0, 0], [1.5, 0, 0], [0.2, 0.1, 0], [0, 0, -1.5]], float)
    p = Particles(x, 0, -1.0, 1.0, 2.0)
    assert absorb(p, sphere2) == 2
    assert p.ids.tolist() == [0, 2]
    assert p.absorbed_count == 2 and p.absorbed_charge == -4.0
    assert absorb(p, sphere2) == 0


def test_alive_non_increasing(sphere2):
    p = init_uniform(sphere2, 500, velocity="maxwellian", seed=11)
    alive = [len(p)]
    for _ in range(20):
        step_leapfrog(p, lambda s: np.zeros_like(s.x), 0.02, sphere2)
        alive.append(len(p))
    assert all(a >= b for a, b in zip(alive, alive[1:]))
    assert alive[-1] < alive[0]


# ---------------------------------------------------------------- diagnostics

def test_dft_definition(rng):
    s = rng.standard_normal(12)
    n = np.arange(12)
    ref = np.array([np.sum(s * np.exp(-2j * np.pi * n * k / 12)) for k in range(12)])
    np.testing.assert_allclose(dft(s), ref, atol=1e-12)


def test_pure_cosine():
    n = np.arange(64)
    period = 8 * 0.1
    s = np.cos(2 * np.pi * n * 0.1 / period) + 3.0
    f, _ = dominant_nonzero_frequency(s, 0.1)
    assert abs(f - 1 / period) <= 1 / (64 * 0.1)


def test_two_cosines():
    n = np.arange(128)
    s = 3 * np.cos(2 * np.pi * 5 * n / 128) + np.cos(2 * np.pi * 17 * n / 128)
    f, _ = dominant_nonzero_frequency(s, 1.0)
    assert f == pytest.approx(5 / 128)


def test_constant_series_rejected():
    with pytest.raises(ValueError, match="no nonzero mode"):
        dominant_nonzero_frequency(np.full(16, 4.0), 1.0)
    with pytest.raises(ValueError):
        spectrum([1.0, 2.0, 3.0], 1.0)


def test_parseval(rng):
    s = rng.standard_normal(101)
    X = dft(s)
    lhs = np.sum((s - s.mean()) ** 2)
    rhs = np.sum(np.abs(X[1:]) ** 2) / len(s)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_region_counts():
    x = np.zeros((7, 3))
    assert region_counts(x, [(-0.25, 0.25)]).tolist() == [7]
    x[:, 2] = [-2.5, -2.0, -0.25, 0.25, 2.0, 2.5, 1.0]
    assert region_counts(x, [(-2.5, -2.0), (-0.25, 0.25), (2.0, 2.5)]).tolist() == [2, 2, 2]
    assert region_counts(np.zeros((0, 3)), [(0, 1), (1, 2), (2, 3)]).tolist() == [0, 0, 0]


def test_radial_histogram_uniform():
    p = init_uniform(Ball(1.0), 100_000, seed=12)
    h = radial_histogram(p.x, 20)
    assert h.counts.sum() == 100_000
    assert h.chi2_per_dof() < 2
    np.testing.assert_allclose(h.reference, np.diff(h.edges**3) / np.diff(h.edges), rtol=1e-14)
    assert radial_histogram(np.zeros((0, 3))).counts.sum() == 0


def test_radial_histogram_total_normalisation():
    p = init_uniform(Ball(1.0), 1000, seed=3)
    h = radial_histogram(p.x[:500], 10, total=1000)
    np.testing.assert_allclose(h.density, h.counts / (1000 * 0.1))
