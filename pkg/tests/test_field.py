import math

import numpy as np
import pytest
from scipy import constants as C

from h2plasma.bemops import edge_midpoint_rule
from h2plasma.field import (FieldSolver, NondimensionalParameters, SolverConfig, background_field,
                            background_potential, evaluate_field_at, evaluate_total_field,
                            image_charge_field, newton_flux, solve_dirichlet, solve_mixed,
                            solve_neumann)
from h2plasma.mesh import BoundaryCondition, SurfaceMesh
from h2plasma.quadrature import dunavant7
from h2plasma.solvers import LinearSolver, SolverError, conjugate_gradient

from conftest import ball_points

FOUR_PI = 4 * math.pi
UNIT = NondimensionalParameters.unit()


# ---------------------------------------------------------------- parameters

def test_beta_matches_debye_length():
    p = NondimensionalParameters(L0=0.1, n0=1e12, kT0_eV=1.0)
    lam = math.sqrt(C.epsilon_0 * C.e / (1e12 * C.e**2))
    assert p.beta == pytest.approx((lam / 0.1) ** 2, rel=1e-12)
    assert p.beta == pytest.approx(5.5263e-3, rel=1e-4)
    NondimensionalParameters(0.1, 1e12, 1.0, beta=p.beta)
    with pytest.raises(ValueError):
        NondimensionalParameters(0.1, 1e12, 1.0, beta=p.beta * (1 + 1e-9))
    with pytest.raises(ValueError):
        NondimensionalParameters(L0=0.0)


def test_scales():
    p = NondimensionalParameters()
    assert p.v0 == pytest.approx(math.sqrt(C.e / C.m_e))
    assert p.t0 == pytest.approx(0.1 / p.v0)
    assert UNIT.beta == pytest.approx(1.0, rel=1e-12)
    # nondimensional plasma frequency is 1/sqrt(beta)
    assert p.plasma_frequency() * p.t0 == pytest.approx(1 / math.sqrt(p.beta), rel=1e-12)
    assert p.scaled_density(10).beta == pytest.approx(p.beta / 10, rel=1e-12)
    assert float(p.magnetic_field(0.01)) == pytest.approx(C.e * 0.01 * p.t0 / C.m_e)


def test_background_field_is_minus_gradient():
    x = np.array([[0.3, -0.2, 0.5]])
    beta = 0.7
    np.testing.assert_allclose(background_field(x, beta), x / (3 * beta), rtol=1e-15)
    h = 1e-6
    num = np.array([-(background_potential(x + h * e, beta) - background_potential(x - h * e, beta))[0]
                    / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(num, x[0] / (3 * beta), rtol=1e-8)


# ---------------------------------------------------------------- Dirichlet

def test_dirichlet_zero(sphere2, mats2):
    tr = solve_dirichlet(mats2, sphere2, 0.0)
    assert np.array_equal(tr.phi, np.zeros(sphere2.n_vertices))
    assert np.array_equal(tr.t, np.zeros(sphere2.n_triangles))


def test_dirichlet_central_charge(sphere3, mats3):
    tr = solve_dirichlet(mats3, sphere3, 0.0, (np.zeros((1, 3)), np.ones(1)), UNIT)
    np.testing.assert_allclose(tr.phi, -1 / FOUR_PI, rtol=1e-12)
    assert np.abs(tr.t).max() <= 1e-2


def test_dirichlet_gauss_law(sphere3, mats3, rng):
    params = NondimensionalParameters()
    x = ball_points(rng, 300, 0.6)
    wq = rng.uniform(0.5, 1.5, 300) * 1e-3
    tr = solve_dirichlet(mats3, sphere3, 0.0, (x, wq), params)
    total = tr.t @ sphere3.areas + newton_flux(sphere3, x, wq, params.beta).sum()
    assert total == pytest.approx(-wq.sum() / params.beta, rel=0.02)


def test_dirichlet_background_data(sphere2, mats2):
    beta = 0.3
    params = NondimensionalParameters(n0=NondimensionalParameters().n0 * NondimensionalParameters().beta / beta)
    tr = solve_dirichlet(mats2, sphere2, 0.0, params=params, background=True)
    np.testing.assert_allclose(tr.phi, 1 / (6 * beta), rtol=1e-12)


PROBES = np.array([[0.0, 0.0, 0.0], [-0.5, 0.1, 0.2], [0.2, 0.4, -0.3], [0.0, -0.6, 0.0],
                   [-0.3, -0.3, -0.3], [0.5, 0.0, 0.4], [0.8, 0.0, 0.0], [0.1, 0.1, 0.6]])


def _image_error(mesh, mats, image_only=False):
    a = np.array([[0.5, 0.0, 0.0]])
    tr = solve_dirichlet(mats, mesh, 0.0, (a, np.ones(1)), UNIT)
    rep = evaluate_field_at(PROBES, tr, mesh, (a, np.ones(1)), UNIT)
    ref = image_charge_field(PROBES, a[0], 1.0, 1.0)
    got = rep.E
    if image_only:
        ref = ref - rep.parts["particle"]
        got = rep.parts["boundary"]
    return (np.linalg.norm(got - ref, axis=1) / np.linalg.norm(ref, axis=1)).max()


def test_image_charge(sphere3, mats3):
    assert _image_error(sphere3, mats3) <= 0.05


def test_image_charge_refinement(sphere2, mats2, sphere3, mats3, sphere4, mats4):
    e = [_image_error(m, g, image_only=True) for m, g in
         ((sphere2, mats2), (sphere3, mats3), (sphere4, mats4))]
    assert e[0] > e[1] > e[2]


def _own_image(p, a, q, beta):
    img = a / (a @ a)
    d = p - img
    return -q / np.linalg.norm(a) * d / (FOUR_PI * beta * np.linalg.norm(d, axis=1)[:, None] ** 3)


def test_two_particle_image_superposition(sphere3, mats3):
    x = np.array([[0.4, 0.0, 0.0], [-0.3, 0.2, 0.1]])
    wq = np.array([1.0, -0.5])
    tr = solve_dirichlet(mats3, sphere3, 0.0, (x, wq), UNIT)
    rep = evaluate_total_field(tr, sphere3, (x, wq), UNIT)
    ref = np.zeros((2, 3))
    for i in range(2):
        j = 1 - i
        ref[i] = image_charge_field(x[i:i + 1], x[j], wq[j], 1.0)[0] + _own_image(x[i:i + 1], x[i], wq[i], 1.0)[0]
    err = np.linalg.norm(rep.E - ref, axis=1) / np.linalg.norm(ref, axis=1)
    assert err.max() <= 0.05


def test_decomposition_and_superposition(sphere2, mats2, rng):
    params = NondimensionalParameters()
    xa, xb = ball_points(rng, 40, 0.7), ball_points(rng, 30, 0.7)
    wa, wb = rng.uniform(-1, 1, 40) * 1e-3, rng.uniform(-1, 1, 30) * 1e-3
    probes = ball_points(rng, 25, 0.6)

    def field(x, wq):
        tr = solve_dirichlet(mats2, sphere2, 0.0, (x, wq), params)
        return evaluate_field_at(probes, tr, sphere2, (x, wq), params)

    ra, rb = field(xa, wa), field(xb, wb)
    rab = field(np.vstack([xa, xb]), np.concatenate([wa, wb]))
    assert rab.check_decomposition() <= 1e-14 * np.abs(rab.E).max()
    np.testing.assert_allclose(rab.E, ra.E + rb.E, rtol=0, atol=1e-8 * np.abs(rab.E).max())
    rep = evaluate_total_field(solve_dirichlet(mats2, sphere2, 0.0, (xa, wa), params), sphere2,
                               (xa, wa), params, background=True)
    assert set(rep.parts) == {"particle", "boundary", "background"}
    assert rep.check_decomposition() <= 1e-14 * np.abs(rep.E).max()


def test_unreliable_flag(sphere2, mats2):
    x = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.9985]])
    tr = solve_dirichlet(mats2, sphere2, 0.0, (x, np.ones(2) * 1e-3), UNIT)
    d = sphere2.distance_to_boundary(x)
    from h2plasma.h2 import H2Config
    rep = evaluate_total_field(tr, sphere2, (x, np.ones(2) * 1e-3), UNIT, h2=H2Config(delta=d[1] * 1.5))
    assert rep.unreliable.tolist() == [False, True]
    assert np.all(np.isfinite(rep.E))


# ---------------------------------------------------------------- Neumann

def test_d_sums_to_area(sphere2, mats2):
    assert mats2.d.sum() == pytest.approx(sphere2.total_area, rel=1e-13)


def test_neumann_zero(sphere2, mats2):
    bc = BoundaryCondition({0: ("neumann", 0.0)})
    tr = solve_neumann(mats2, sphere2, bc)
    assert np.abs(tr.phi).max() <= 1e-12
    assert tr.t @ sphere2.areas == 0


def test_neumann_alpha_invariance(sphere2, mats2, rng):
    x = ball_points(rng, 50, 0.6)
    wq = rng.uniform(0.5, 1.5, 50)
    # compatible data: flux of the particles spread uniformly
    g = -wq.sum() / sphere2.total_area
    a = 1 / sphere2.total_area
    t1 = solve_neumann(mats2, sphere2, g, (x, wq), UNIT, alpha=a)
    t2 = solve_neumann(mats2, sphere2, g, (x, wq), UNIT, alpha=10 * a)
    assert np.abs(t1.phi - t2.phi).max() <= 1e-8 * max(np.abs(t1.phi).max(), 1.0)
    assert abs(t1.t @ sphere2.areas + wq.sum()) <= 1e-10 * wq.sum()


def test_neumann_recovers_x3(sphere3, mats3):
    bc = BoundaryCondition({0: ("neumann", "normal_x3")})
    tr = solve_neumann(mats3, sphere3, bc)
    z = sphere3.vertices[:, 2]
    assert np.abs(tr.phi - (z - z @ mats3.d / mats3.d.sum())).max() <= 1e-3


def test_neumann_incompatible_warns(sphere2, mats2):
    with pytest.warns(RuntimeWarning, match="incompatible"):
        solve_neumann(mats2, sphere2, 1.0)


# ---------------------------------------------------------------- mixed

def _hemisphere(mesh):
    labels = (mesh.centroids[:, 2] > 0).astype(int)
    return SurfaceMesh(mesh.vertices, mesh.triangles, labels)


def _l2_dirichlet_error(mesh, tr, mask):
    bary, w = dunavant7()
    pts = np.einsum("qa,kac->kqc", bary, mesh.corners[mask])
    exact = pts[..., 2] / np.linalg.norm(pts, axis=-1)
    a = mesh.areas[mask][:, None] * w[None, :]
    err = np.sqrt(np.sum(a * (tr.t[mask][:, None] - exact) ** 2))
    return err / np.sqrt(np.sum(a * exact**2))


def _mixed_x3(mesh, mats):
    m = _hemisphere(mesh)
    bc = BoundaryCondition({1: ("dirichlet", "x3"), 0: ("neumann", "normal_x3")})
    tr = solve_mixed(mats, m, bc)
    return _l2_dirichlet_error(m, tr, bc.dirichlet_mask(m)), tr, m


def test_mixed_x3_oracle(sphere3, mats3, sphere4, mats4):
    e3, tr, m = _mixed_x3(sphere3, mats3)
    e4, _, _ = _mixed_x3(sphere4, mats4)
    assert e3 <= 0.10
    assert e4 < e3
    # recovered Dirichlet trace on the Neumann part is the harmonic datum itself
    nN = tr.node_order[:tr.n_neumann_nodes]
    assert np.abs(tr.phi[nN] - m.vertices[nN, 2]).max() <= 1e-3
    assert tr.stats["iterations"] >= 1


def test_mixed_all_dirichlet_matches_dirichlet(sphere2, mats2, rng):
    x = ball_points(rng, 20, 0.5)
    wq = rng.uniform(0.5, 1.5, 20)
    bc = BoundaryCondition.all_dirichlet(sphere2, 0.0)
    tm = solve_mixed(mats2, sphere2, bc, (x, wq), UNIT)
    td = solve_dirichlet(mats2, sphere2, bc, (x, wq), UNIT)
    assert tm.kind == "dirichlet"
    assert np.abs(tm.t - td.t).max() <= 1e-8 * np.abs(td.t).max()
    assert np.abs(tm.phi - td.phi).max() <= 1e-8 * np.abs(td.phi).max()


def test_mixed_zero(sphere2, mats2):
    m = _hemisphere(sphere2)
    bc = BoundaryCondition({1: ("dirichlet", 0.0), 0: ("neumann", 0.0)})
    tr = solve_mixed(mats2, m, bc)
    assert np.abs(tr.phi).max() == 0 and np.abs(tr.t).max() == 0


def test_mixed_redirects_to_neumann(sphere2, mats2):
    tr = solve_mixed(mats2, sphere2, BoundaryCondition({0: ("neumann", 0.0)}))
    assert tr.kind == "neumann"


# ---------------------------------------------------------------- solvers

def test_identity_one_iteration():
    A = np.eye(30)
    b = np.arange(1.0, 31.0)
    s = LinearSolver(A, "cg")
    np.testing.assert_allclose(s.solve(b), b)
    assert s.last.iterations == 1


def test_cg_on_V(mats3):
    V = mats3.V_dense()
    b = mats3.double_layer_rhs(mats3.M.T @ np.ones(mats3.n_triangles))
    cg = LinearSolver(V, "cg", spd=True)
    x1 = cg.solve(b)
    assert cg.last.iterations <= 200
    x2 = LinearSolver(V, "dense", spd=True).solve(b)
    assert np.abs(x1 - x2).max() <= 1e-7 * np.abs(x2).max()


def test_gmres_and_errors(rng):
    A = np.eye(50) * 4 + rng.standard_normal((50, 50)) * 0.1
    b = rng.standard_normal(50)
    s = LinearSolver(A, "gmres")
    np.testing.assert_allclose(A @ s.solve(b), b, atol=1e-7)
    with pytest.raises(SolverError):
        conjugate_gradient(np.diag(np.linspace(1, 1e6, 200)), np.ones(200), maxiter=3, jacobi=False)
    with pytest.raises(ValueError):
        LinearSolver(A, "qr")


# ---------------------------------------------------------------- pipeline

def test_field_solver_matches_functions(sphere2, mats2, rng):
    params = NondimensionalParameters()
    x = ball_points(rng, 400, 0.7)
    wq = rng.uniform(0.5, 1.5, 400) * 1e-3
    bc = BoundaryCondition.all_dirichlet(sphere2)
    fs = FieldSolver(sphere2, bc, mats2, params, background=True)
    rep, tr = fs.compute(x, wq)
    ref_tr = solve_dirichlet(mats2, sphere2, bc, (x, wq), params, background=True)
    np.testing.assert_allclose(tr.t, ref_tr.t, rtol=0, atol=1e-9 * np.abs(ref_tr.t).max())
    ref = evaluate_total_field(ref_tr, sphere2, (x, wq), params, background=True)
    assert np.abs(rep.E - ref.E).max() <= 1e-9 * np.abs(ref.E).max()
    assert {"rebuild", "newton", "solve", "particle_field", "boundary_field"} <= set(rep.timings)


def test_field_solver_mixed_and_neumann(sphere2, mats2, rng):
    m = _hemisphere(sphere2)
    x = ball_points(rng, 100, 0.6)
    wq = rng.uniform(0.5, 1.5, 100) * 1e-2
    for bc, kind in ((BoundaryCondition({1: ("dirichlet", 0.0), 0: ("neumann", 0.0)}), "mixed"),
                     (BoundaryCondition({0: ("neumann", 0.0), 1: ("neumann", 0.0)}), "neumann")):
        fs = FieldSolver(m, bc, mats2, UNIT, solver=SolverConfig())
        assert fs.kind == kind
        with np.errstate(all="ignore"):
            import warnings
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                rep, tr = fs.compute(x, wq)
        assert rep.E.shape == (100, 3) and np.all(np.isfinite(rep.E))
    empty, _ = fs.compute(np.zeros((0, 3)), np.zeros(0))
    assert empty.E.shape == (0, 3)


def test_edge_nodes_shared(sphere2):
    nodes, _ = edge_midpoint_rule(sphere2)
    assert len(np.unique(np.round(nodes, 12), axis=0)) == len(nodes)
