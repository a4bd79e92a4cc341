"""Conjugate-gradient solver and displacement-only Laplacian smoothing."""
import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from headfield.mesh import cotangent_laplacian
from headfield.morphable import icosphere
from headfield.smooth import (SmoothConfig, SolverError, apply_refinement,
                              smooth_displacements, solve_spd)


# ---------------------------------------------------------------------------
# CG solver


def test_solve_identity():
    b = np.array([1.0, -2.0, 3.0])
    x = solve_spd(sp.identity(3, format="csr"), b)
    assert np.allclose(x, b)


def test_solve_diagonal():
    a = sp.diags([2.0, 4.0]).tocsr()
    x = solve_spd(a, np.array([2.0, 4.0]))
    assert np.allclose(x, [1.0, 1.0])


def test_solve_zero_rhs():
    a = sp.identity(4, format="csr")
    assert np.array_equal(solve_spd(a, np.zeros(4)), np.zeros(4))


def test_solve_random_spd_residual():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(50, 50))
    a = sp.csr_matrix(m.T @ m + np.eye(50))
    b = rng.normal(size=50)
    x = solve_spd(a, b, tol=1e-10)
    assert np.linalg.norm(a @ x - b) <= 1e-8 * np.linalg.norm(b) * 100


def test_solve_nonconvergence_raises():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(30, 30))
    a = sp.csr_matrix(m.T @ m + 1e-8 * np.eye(30))  # badly conditioned
    with pytest.raises(SolverError) as err:
        solve_spd(a, rng.normal(size=30), tol=1e-14, max_iter=2)
    assert err.value.iterations == 2
    assert err.value.residual > 0


# ---------------------------------------------------------------------------
# smoothing contracts


def _closed_mesh():
    return icosphere(2, radius=0.09)


def test_smooth_zero_displacement():
    mesh = _closed_mesh()
    lap = cotangent_laplacian(mesh)
    d = np.zeros((mesh.n_vertices, 3))
    x = smooth_displacements(lap, d, SmoothConfig())
    assert np.array_equal(x, d)


def test_smooth_lambda_zero_identity():
    mesh = _closed_mesh()
    lap = cotangent_laplacian(mesh)
    rng = np.random.default_rng(0)
    d = rng.normal(size=(mesh.n_vertices, 3))
    x = smooth_displacements(lap, d, SmoothConfig(lam=0.0))
    assert np.array_equal(x, d)
    assert x is not d  # a defensive copy, not the caller's array


def test_smooth_constant_displacement_fixed_point():
    # L annihilates constants on a closed mesh, so (I + lam L) c = c
    mesh = _closed_mesh()
    lap = cotangent_laplacian(mesh)
    c = np.array([0.01, -0.02, 0.003])
    d = np.tile(c, (mesh.n_vertices, 1))
    x = smooth_displacements(lap, d, SmoothConfig(lam=0.05, iterations=10))
    assert np.abs(x - d).max() < 1e-7


def test_smooth_shape_mismatch():
    mesh = _closed_mesh()
    lap = cotangent_laplacian(mesh)
    with pytest.raises(ValueError):
        smooth_displacements(lap, np.zeros((7, 3)), SmoothConfig())


def test_smooth_config_validation():
    with pytest.raises(ValueError):
        SmoothConfig(lam=-0.1)
    with pytest.raises(ValueError):
        SmoothConfig(iterations=0)


def test_smooth_never_expands_norm():
    # (I + lam L)^-1 has spectral radius <= 1 on the PSD Laplacian
    mesh = _closed_mesh()
    lap = cotangent_laplacian(mesh)
    rng = np.random.default_rng(2)
    for _ in range(10):
        d = rng.normal(size=(mesh.n_vertices, 3))
        x = smooth_displacements(lap, d, SmoothConfig(lam=0.05, iterations=3))
        assert np.linalg.norm(x) <= np.linalg.norm(d) * (1 + 1e-9)


def test_smooth_energy_decreases_with_lambda():
    mesh = _closed_mesh()
    lap = cotangent_laplacian(mesh)
    rng = np.random.default_rng(3)
    d = rng.normal(size=(mesh.n_vertices, 3)) * 0.01

    def energy(x):
        return sum(x[:, c] @ (lap @ x[:, c]) for c in range(3))

    energies = []
    for lam in (0.0, 0.01, 0.05, 0.2, 1.0):
        x = smooth_displacements(lap, d, SmoothConfig(lam=lam, iterations=5))
        energies.append(energy(x))
    assert all(a >= b - 1e-12 for a, b in zip(energies, energies[1:]))


def test_repeated_passes_smooth_more():
    mesh = _closed_mesh()
    lap = cotangent_laplacian(mesh)
    rng = np.random.default_rng(4)
    d = rng.normal(size=(mesh.n_vertices, 3)) * 0.01

    def energy(x):
        return sum(x[:, c] @ (lap @ x[:, c]) for c in range(3))

    one = smooth_displacements(lap, d, SmoothConfig(lam=0.05, iterations=1))
    ten = smooth_displacements(lap, d, SmoothConfig(lam=0.05, iterations=10))
    assert energy(ten) < energy(one)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_smooth_linear_in_displacement(seed):
    mesh = icosphere(1, radius=1.0)
    lap = cotangent_laplacian(mesh)
    rng = np.random.default_rng(seed)
    d1 = rng.normal(size=(mesh.n_vertices, 3))
    d2 = rng.normal(size=(mesh.n_vertices, 3))
    cfg = SmoothConfig(lam=0.1, iterations=2, cg_tol=1e-12)
    lhs = smooth_displacements(lap, d1 + 0.5 * d2, cfg)
    rhs = smooth_displacements(lap, d1, cfg) + 0.5 * smooth_displacements(lap, d2, cfg)
    assert np.allclose(lhs, rhs, atol=1e-8)


# ---------------------------------------------------------------------------
# applying refinement


def test_apply_zero_refinement():
    mesh = _closed_mesh()
    out = apply_refinement(mesh, np.zeros_like(mesh.vertices))
    assert np.array_equal(out.vertices, mesh.vertices)
    assert np.array_equal(out.faces, mesh.faces)


def test_apply_constant_refinement():
    mesh = _closed_mesh()
    d = np.tile([0.0, 0.0, 0.01], (mesh.n_vertices, 1))
    out = apply_refinement(mesh, d)
    assert np.allclose(out.vertices, mesh.vertices + [0, 0, 0.01])


def test_apply_shape_mismatch():
    mesh = _closed_mesh()
    with pytest.raises(ValueError):
        apply_refinement(mesh, np.zeros((3, 3)))


def test_smoothing_pipeline_on_sphere_oracle():
    # perturb a shrunken sphere toward the true radius and smooth: the refined
    # frontal cap must sit closer to the true surface than the template
    from headfield.field import AnalyticDensity, SphereShape
    from headfield.refine import (PerturbConfig, build_sdf,
                                  extract_height_field, frontal_confidence,
                                  perturb_vertices)
    from headfield.mesh import vertex_normals

    r = 0.09
    lim = r * 1.15
    density = AnalyticDensity(SphereShape(radius=r), sigma_max=200.0, softness=0.004,
                              bounds=(np.full(3, -lim), np.full(3, lim)))
    hf = extract_height_field(density, resolution=(96, 96), n_steps=384)
    sdf = build_sdf(hf)
    mesh = icosphere(2, radius=0.08)
    disp = perturb_vertices(mesh, sdf, PerturbConfig(32, 0.03, 0.005))
    lap = cotangent_laplacian(mesh)
    refined = apply_refinement(mesh, smooth_displacements(lap, disp, SmoothConfig()))
    conf = frontal_confidence(vertex_normals(mesh))
    cap = conf > 0.5
    before = np.abs(np.linalg.norm(mesh.vertices[cap], axis=1) - r).mean()
    after = np.abs(np.linalg.norm(refined.vertices[cap], axis=1) - r).mean()
    assert after <= before
