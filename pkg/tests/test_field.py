"""Density sources, voxel I/O, latent splat / blur / diffusion, trilinear lookup."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from headfield.field import (AnalyticDensity, GridDensity, LatentCodes,
                             SphereShape, BumpySphereShape, VertexSplat,
                             analytic_density, box_blur, diffuse_latents,
                             dilated_bounds, load_voxel_grid, query_latent,
                             save_voxel_grid, trilinear_sample)
from headfield.mesh import TriMesh
from headfield.morphable import icosphere


# ---------------------------------------------------------------------------
# analytic density


def test_analytic_sphere_deep_inside():
    # far inside the unit sphere the sigmoid saturates: sigma ~ sigma_max
    sigma = analytic_density(SphereShape(radius=1.0), np.zeros(3), sigma_max=200.0)
    assert abs(sigma - 200.0) < 1e-6


def test_analytic_sphere_on_surface_half():
    sigma = analytic_density(SphereShape(radius=1.0), np.array([1.0, 0.0, 0.0]),
                             sigma_max=200.0)
    assert sigma == pytest.approx(100.0, abs=1e-9)


def test_analytic_sphere_far_outside():
    # sigmoid(-1 / 0.005) underflows well below 1e-6 of sigma_max, and the
    # point is outside the dilated bounds anyway
    sigma = analytic_density(SphereShape(radius=1.0), np.array([2.0, 0.0, 0.0]),
                             sigma_max=200.0, softness=0.005)
    assert sigma < 1e-6 * 200.0


def test_analytic_density_nonnegative():
    rng = np.random.default_rng(0)
    q = rng.uniform(-2, 2, size=(1000, 3))
    sigma = analytic_density(SphereShape(radius=1.0), q)
    assert np.all(sigma >= 0.0)


def test_bumpy_sphere_amplitude_bound():
    shape = BumpySphereShape(radius=0.09, bump_amplitude=0.012, n_lobes=4, seed=3)
    rng = np.random.default_rng(1)
    dirs = rng.normal(size=(2000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = shape.surface_radius(dirs)
    assert np.all(np.abs(r - 0.09) <= 0.012 + 1e-12)


def test_bumpy_sphere_surface_mesh_consistent():
    shape = BumpySphereShape(radius=0.09, bump_amplitude=0.01, seed=0)
    mesh = shape.surface_mesh(3)
    # surface vertices should sit on the (radial-approximation) zero level set
    assert np.abs(shape.sdf(mesh.vertices)).max() < 1e-9


# ---------------------------------------------------------------------------
# grid density


def test_grid_density_constant():
    grid = GridDensity(np.full((8, 8, 8), 5.0), (np.zeros(3), np.ones(3)))
    rng = np.random.default_rng(0)
    q = rng.uniform(0, 1, size=(100, 3))
    assert np.allclose(grid.density(q), 5.0)


def test_grid_density_outside_zero():
    grid = GridDensity(np.full((8, 8, 8), 5.0), (np.zeros(3), np.ones(3)))
    assert grid.density(np.array([2.0, 0.5, 0.5])) == 0.0


def test_grid_density_resampling_error():
    # dense resampling of the analytic sphere stays close to the original
    shape = SphereShape(radius=0.09)
    source = AnalyticDensity(shape, sigma_max=200.0)
    grid = GridDensity.from_source(source, 128)
    rng = np.random.default_rng(0)
    lo, hi = source.bounds
    q = rng.uniform(lo, hi, size=(1000, 3))
    err = np.abs(grid.density(q) - source.density(q))
    assert err.max() < 0.05 * 200.0


# ---------------------------------------------------------------------------
# voxel grid file round-trip


def test_voxel_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.normal(size=(5, 6, 7, 2)).astype(np.float32)
    bounds = (np.array([-1.0, -2.0, -3.0]), np.array([1.0, 2.0, 3.0]))
    p = tmp_path / "grid.vox"
    save_voxel_grid(p, values, bounds)
    back, back_bounds = load_voxel_grid(p)
    assert back.shape == (5, 6, 7, 2)
    assert np.array_equal(back.astype(np.float32), values)
    assert np.array_equal(back_bounds[0], bounds[0])
    assert np.array_equal(back_bounds[1], bounds[1])


def test_voxel_layout_x_fastest(tmp_path):
    # byte layout contract: x varies fastest in the payload
    values = np.arange(8, dtype=np.float32).reshape(2, 2, 2, 1)
    p = tmp_path / "grid.vox"
    save_voxel_grid(p, values, (np.zeros(3), np.ones(3)))
    raw = p.read_bytes()
    payload = np.frombuffer(raw[raw.index(b"\n") + 1:], dtype="<f4")
    # first two entries differ along x (stride 4 in the (x,y,z) flat order)
    assert payload[0] == values[0, 0, 0, 0]
    assert payload[1] == values[1, 0, 0, 0]


def test_voxel_truncated_payload_raises(tmp_path):
    p = tmp_path / "grid.vox"
    save_voxel_grid(p, np.zeros((4, 4, 4), dtype=np.float32), (np.zeros(3), np.ones(3)))
    data = p.read_bytes()
    p.write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_voxel_grid(p)


# ---------------------------------------------------------------------------
# trilinear sampling


def test_trilinear_at_node():
    grid = np.zeros((4, 4, 4, 2))
    grid[1, 2, 3] = [5.0, -1.0]
    bounds = (np.zeros(3), np.full(3, 3.0))
    vals, _, w, inside = trilinear_sample(grid, bounds, np.array([1.0, 2.0, 3.0]))
    assert np.allclose(vals, [5.0, -1.0])
    assert inside
    assert w.sum() == pytest.approx(1.0)


def test_trilinear_midpoint_half():
    grid = np.zeros((2, 2, 2, 1))
    grid[0, 0, 0] = 4.0
    bounds = (np.zeros(3), np.ones(3))
    vals, _, _, _ = trilinear_sample(grid, bounds, np.array([0.5, 0.0, 0.0]))
    assert vals[0] == pytest.approx(2.0)


def test_trilinear_outside_zero():
    grid = np.ones((3, 3, 3, 1))
    bounds = (np.zeros(3), np.ones(3))
    vals, _, w, inside = trilinear_sample(grid, bounds, np.array([1.5, 0.5, 0.5]))
    assert not inside
    assert vals[0] == 0.0
    assert np.all(w == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_trilinear_weights_partition_of_unity(seed):
    rng = np.random.default_rng(seed)
    grid = rng.normal(size=(5, 5, 5, 3))
    bounds = (np.zeros(3), np.ones(3))
    q = rng.uniform(0, 1, size=(32, 3))
    vals, idx, w, inside = trilinear_sample(grid, bounds, q)
    assert np.allclose(w.sum(axis=-1), 1.0)
    # values equal the weighted corner combination
    flat = grid.reshape(-1, 3)
    assert np.allclose(vals, np.einsum("qk,qkc->qc", w, flat[idx]))


# ---------------------------------------------------------------------------
# splat, blur, diffusion


def test_splat_single_vertex_at_node():
    bounds = (np.zeros(3), np.ones(3))
    splat = VertexSplat(np.array([[0.0, 0.0, 0.0]]), bounds, 5)
    grid = splat.forward(np.array([[3.0, -2.0]]))
    assert np.allclose(grid[0, 0, 0], [3.0, -2.0])
    assert np.count_nonzero(grid) == 2


def test_splat_rejects_out_of_bounds_vertex():
    with pytest.raises(ValueError):
        VertexSplat(np.array([[2.0, 0.0, 0.0]]), (np.zeros(3), np.ones(3)), 5)


def test_splat_normalization_constant_codes():
    # every touched cell receives exactly the shared constant
    mesh = icosphere(2, radius=0.09)
    bounds = dilated_bounds(*mesh.aabb())
    splat = VertexSplat(mesh.vertices, bounds, 24)
    c = np.array([2.5, -1.0])
    grid = splat.forward(np.tile(c, (mesh.n_vertices, 1)))
    touched = np.abs(grid).sum(axis=-1) > 0
    assert np.allclose(grid[touched], c)


def test_splat_backward_is_adjoint():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.1, 0.9, size=(20, 3))
    splat = VertexSplat(pts, (np.zeros(3), np.ones(3)), 8)
    codes = rng.normal(size=(20, 4))
    grid_grad = rng.normal(size=(8, 8, 8, 4))
    lhs = np.sum(splat.forward(codes) * grid_grad)
    rhs = np.sum(codes * splat.backward(grid_grad))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_box_blur_mass_conservation_interior():
    grid = np.zeros((9, 9, 9, 1))
    grid[4, 4, 4] = 1.0
    blurred = box_blur(grid, 1)
    assert abs(blurred.sum() - 1.0) < 1e-6


def test_box_blur_self_adjoint():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(6, 6, 6, 2))
    b = rng.normal(size=(6, 6, 6, 2))
    assert np.sum(box_blur(a, 3) * b) == pytest.approx(np.sum(a * box_blur(b, 3)), rel=1e-12)


def test_box_blur_zero_passes_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4, 4, 1))
    assert np.array_equal(box_blur(a, 0), a)


def test_diffuse_constant_codes_preserved():
    # blur preserves constants over its interior support
    mesh = icosphere(2, radius=0.09)
    codes = LatentCodes(np.tile([1.0, 2.0], (mesh.n_vertices, 1)))
    vol = diffuse_latents(codes, mesh, resolution=32, blur_passes=2)
    center = query_latent(vol, np.zeros((1, 3)))
    # deep inside the support the blurred field cannot exceed the constant
    assert np.all(np.abs(vol.grid.reshape(-1, 2)).max(axis=0) <= np.array([1.0, 2.0]) + 1e-9)
    assert center.shape == (1, 2)


def test_diffuse_rejects_resolution_out_of_range():
    mesh = icosphere(1, radius=0.09)
    codes = LatentCodes(np.zeros((mesh.n_vertices, 2)))
    with pytest.raises(ValueError):
        diffuse_latents(codes, mesh, resolution=8)
    with pytest.raises(ValueError):
        diffuse_latents(codes, mesh, resolution=512)


def test_diffuse_rejects_code_count_mismatch():
    mesh = icosphere(1, radius=0.09)
    with pytest.raises(ValueError):
        diffuse_latents(LatentCodes(np.zeros((3, 2))), mesh)


def test_query_latent_outside_zero():
    mesh = icosphere(1, radius=0.09)
    codes = LatentCodes(np.ones((mesh.n_vertices, 2)))
    vol = diffuse_latents(codes, mesh, resolution=16)
    out = query_latent(vol, np.array([[1.0, 1.0, 1.0]]))
    assert np.all(out == 0.0)


def test_splat_exact_node_then_query():
    # vertex at a grid node, no blur: querying that node returns its code
    bounds = (np.zeros(3), np.ones(3))
    n = 5
    node = np.array([0.25, 0.5, 0.75])  # exact nodes of a 5^3 grid on [0,1]
    splat = VertexSplat(node[None], bounds, n)
    grid = splat.forward(np.array([[7.0]]))
    vals, _, _, _ = trilinear_sample(grid, bounds, node)
    assert vals[0] == pytest.approx(7.0)
