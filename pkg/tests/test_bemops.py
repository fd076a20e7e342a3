import math
import warnings

import numpy as np
import pytest

from h2plasma.bemops import (H2Galerkin, assemble_galerkin, assemble_N0, assemble_N1,
                             edge_midpoint_rule, load_matrices, mass_matrix, newton_potential_direct,
                             save_matrices, surface_curls)
from h2plasma.mesh import SurfaceMesh

from conftest import ball_points

FOUR_PI = 4 * math.pi


def _tetra():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    t = [[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]]
    return SurfaceMesh(v, t)


def test_mass_matrix_right_triangle():
    M = mass_matrix(_tetra()).toarray()
    np.testing.assert_allclose(M[0, [0, 1, 2]], 1 / 6, rtol=1e-15)
    assert M[0, 3] == 0


def test_mass_matrix_row_sums(sphere2):
    M = mass_matrix(sphere2)
    np.testing.assert_allclose(np.asarray(M.sum(axis=1)).ravel(), sphere2.areas, rtol=1e-14)


def test_surface_curls_tangential(sphere2):
    # curls of hats are tangential and sum to zero on every triangle
    C = [c.toarray() for c in surface_curls(sphere2)]
    total = np.stack([c.sum(axis=1) for c in C], axis=1)
    assert np.abs(total).max() < 1e-12
    for k in range(0, sphere2.n_triangles, 37):
        for i in sphere2.triangles[k]:
            g = np.array([C[a][k, i] for a in range(3)])
            assert abs(g @ sphere2.normals[k]) < 1e-10 * np.linalg.norm(g)


def test_edge_midpoint_rule_quadratic(sphere2):
    nodes, Q = edge_midpoint_rule(sphere2)
    assert Q.shape == (sphere2.n_triangles, len(nodes))
    # every triangle owns three shared nodes
    assert np.all(np.diff(Q.indptr) == 3)
    assert len(nodes) == 3 * sphere2.n_triangles // 2
    f = nodes[:, 0] ** 2 + nodes[:, 1] * nodes[:, 2]
    c = sphere2.corners
    # exact quadratic integral via the 3-point midpoint rule per triangle computed independently
    mids = 0.5 * (c + np.roll(c, -1, axis=1))
    g = mids[..., 0] ** 2 + mids[..., 1] * mids[..., 2]
    np.testing.assert_allclose(Q @ f, sphere2.areas * g.mean(axis=1), rtol=1e-13)


def test_V_spd_and_symmetric(mats2):
    V = mats2.V_dense()
    assert np.abs(V - V.T).max() <= 1e-12 * np.abs(V).max()
    np.linalg.cholesky(V)


def test_D_symmetric_psd_kernel_constants(mats2):
    D = mats2.D
    assert np.abs(D - D.T).max() <= 1e-12 * np.abs(D).max()
    assert np.abs(D @ np.ones(len(D))).max() <= 1e-10
    assert np.linalg.eigvalsh(D).min() > -1e-10 * np.abs(D).max()


def _constant_residual(mats):
    return np.abs(mats.solve_V(mats.double_layer_rhs(np.ones(mats.n_vertices)))).max()


def test_constant_potential(mats3):
    assert _constant_residual(mats3) <= 1e-2


@pytest.mark.xfail(strict=True, reason="flat panels reproduce constants exactly; the residual is "
                   "quadrature noise amplified by the conditioning of V and grows with the level")
def test_constant_potential_decreases(mats2, mats3, mats4):
    r = [_constant_residual(m) for m in (mats2, mats3, mats4)]
    assert r[0] > r[1] > r[2]


def test_non_mesh_rejected():
    with pytest.raises(TypeError):
        assemble_galerkin(np.zeros((3, 3)))


def test_cache_roundtrip(tmp_path, sphere2, mats2):
    a = assemble_galerkin(sphere2, cache_dir=tmp_path)
    files = list(tmp_path.iterdir())
    assert len(files) == 1
    b = assemble_galerkin(sphere2, cache_dir=tmp_path)
    for name in ("V", "K", "D"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
        assert np.array_equal(getattr(a, name), getattr(mats2, name))
    raw = files[0].read_bytes()
    assert raw[:8] == b"H2PBEM\x00\x01"
    (tmp_path / "bad.bin").write_bytes(b"nonsense" + raw[8:])
    with pytest.raises(ValueError):
        load_matrices(tmp_path / "bad.bin")


def test_save_load_generic(tmp_path, rng):
    A = rng.standard_normal((3, 5))
    save_matrices(tmp_path / "m.bin", {"A": A})
    assert np.array_equal(load_matrices(tmp_path / "m.bin")["A"], A)


def test_h2_galerkin_matches_dense(sphere3, mats3, rng):
    op = H2Galerkin(sphere3)
    assert op.V_blocks.n_admissible > 0
    x = rng.standard_normal(sphere3.n_triangles)
    ref = mats3.V @ x
    assert np.linalg.norm(op.matvec_V(x) - ref) / np.linalg.norm(ref) <= 1e-5
    y = rng.standard_normal(sphere3.n_vertices)
    ref = mats3.K @ y
    assert np.linalg.norm(op.matvec_K(y) - ref) / np.linalg.norm(ref) <= 1e-5


def test_N0_zero(sphere2):
    x = np.zeros((5, 3))
    assert np.array_equal(assemble_N0(sphere2, x, np.zeros(5), 1.0), np.zeros(sphere2.n_triangles))


def test_N0_central_charge(sphere3):
    N0 = assemble_N0(sphere3, np.zeros((1, 3)), np.ones(1), 1.0)
    ref = sphere3.areas / FOUR_PI
    assert np.abs(N0 / ref - 1).max() <= 0.02


def test_N0_h2_matches_direct(sphere3, rng):
    x = ball_points(rng, 2000, 0.9)
    wq = rng.uniform(-1, 1, 2000)
    a = assemble_N0(sphere3, x, wq, 0.5)
    b = assemble_N0(sphere3, x, wq, 0.5, direct=True)
    assert np.abs(a - b).max() / np.abs(b).max() <= 1e-5


def test_N0_warns_near_node(sphere2):
    nodes, _ = edge_midpoint_rule(sphere2)
    x = nodes[:1] * (1 - 1e-5)
    with pytest.warns(RuntimeWarning, match="regularised"):
        assemble_N0(sphere2, x, np.ones(1), 1.0, delta=1e-3)


def test_newton_direct_regularised():
    v = newton_potential_direct(np.zeros((1, 3)), np.array([[1e-4, 0, 0]]), np.ones(1), 2.0, delta=1e-3)
    assert v[0] == pytest.approx(1 / (FOUR_PI * 2.0 * 1e-3))


def test_N1_zero(mats2):
    assert np.array_equal(assemble_N1(mats2, np.zeros(mats2.n_triangles)), np.zeros(mats2.n_vertices))


def test_N1_central_charge(sphere3, mats3):
    N0 = assemble_N0(sphere3, np.zeros((1, 3)), np.ones(1), 1.0)
    N1 = assemble_N1(mats3, N0)
    ref = -mats3.d / FOUR_PI
    assert np.abs(N1 / ref - 1).max() <= 0.05


def test_N1_gauss_law(sphere3, mats3, rng):
    beta = 0.3
    x = ball_points(rng, 500, 0.7)
    wq = rng.uniform(0.5, 1.5, 500)
    N1 = assemble_N1(mats3, assemble_N0(sphere3, x, wq, beta))
    assert N1.sum() == pytest.approx(-wq.sum() / beta, rel=0.02)


def test_N1_reports_failed_solve(mats2):
    class Broken:
        n_vertices = mats2.n_vertices
        M = mats2.M

        def solve_V(self, rhs):
            return np.full_like(rhs, np.nan)

        def V_dense(self):
            return mats2.V

        def K_dense(self):
            return mats2.K

    with pytest.raises(RuntimeError, match="residual"):
        assemble_N1(Broken(), np.ones(mats2.n_triangles))
