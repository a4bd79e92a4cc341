"""Density and latent-field machinery: analytic density oracles, voxel grids,
and diffusion of per-vertex latent codes into a dense bounding volume."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import correlate1d
from scipy.special import expit

from .mesh import TriMesh

LATENT_DIM = 16
DEFAULT_RESOLUTION = 96
DEFAULT_BLUR_PASSES = 4
BOUNDS_DILATION = 0.15  # AABB dilation fraction per axis

SIGMA_MAX_DEFAULT = 200.0  # 1/m
SOFTNESS_DEFAULT = 0.005   # m


def dilated_bounds(lo: np.ndarray, hi: np.ndarray, fraction: float = BOUNDS_DILATION):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    pad = fraction * (hi - lo)
    return lo - pad, hi + pad


# ---------------------------------------------------------------------------
# analytic shapes


@dataclass(frozen=True)
class SphereShape:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def sdf(self, q: np.ndarray) -> np.ndarray:
        return np.linalg.norm(q - np.asarray(self.center), axis=-1) - self.radius

    def aabb(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class EllipsoidShape:
    center: tuple = (0.0, 0.0, 0.0)
    radii: tuple = (1.0, 1.0, 1.0)

    def sdf(self, q: np.ndarray) -> np.ndarray:
        # first-order approximation: exact on axes, good near the surface
        r = np.asarray(self.radii)
        p = (q - np.asarray(self.center)) / r
        k0 = np.linalg.norm(p, axis=-1)
        k1 = np.linalg.norm(p / r, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(k1 > 0, k0 * (k0 - 1.0) / np.maximum(k1, 1e-300), -r.min())

    def aabb(self):
        c = np.asarray(self.center, dtype=np.float64)
        r = np.asarray(self.radii, dtype=np.float64)
        return c - r, c + r


class BumpySphereShape:
    """Sphere with deterministic band-limited radial bumps: r(dir) = radius + bumps(dir)."""

    def __init__(self, center=(0.0, 0.0, 0.0), radius=0.09, bump_amplitude=0.01,
                 n_lobes=4, seed=0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.bump_amplitude = float(bump_amplitude)
        rng = np.random.default_rng(seed)
        axes = rng.normal(size=(n_lobes, 3))
        self._axes = axes / np.linalg.norm(axes, axis=1, keepdims=True)
        self._freqs = rng.uniform(2.0, 4.0, size=n_lobes)
        self._phases = rng.uniform(0, 2 * np.pi, size=n_lobes)
        self._gains = rng.uniform(0.5, 1.0, size=n_lobes)
        self._gains /= np.abs(self._gains).sum()  # bump magnitude bounded by amplitude

    def surface_radius(self, dirs: np.ndarray) -> np.ndarray:
        bumps = np.zeros(dirs.shape[:-1])
        for axis, f, ph, g in zip(self._axes, self._freqs, self._phases, self._gains):
            bumps += g * np.cos(f * np.pi * (dirs @ axis) + ph)
        return self.radius + self.bump_amplitude * bumps

    def sdf(self, q: np.ndarray) -> np.ndarray:
        # radial approximation; accurate for bump_amplitude << radius
        p = q - self.center
        dist = np.linalg.norm(p, axis=-1)
        safe = np.maximum(dist, 1e-12)
        dirs = p / safe[..., None]
        return dist - self.surface_radius(dirs)

    def surface_mesh(self, n_subdiv: int = 4) -> TriMesh:
        """Dense ground-truth mesh of the bumpy surface."""
        from .morphable import icosphere

        sphere = icosphere(n_subdiv, 1.0)
        dirs = sphere.vertices
        verts = self.center + dirs * self.surface_radius(dirs)[:, None]
        return TriMesh(verts, sphere.faces)

    def aabb(self):
        r = self.radius + self.bump_amplitude
        return self.center - r, self.center + r


class UnionShape:
    def __init__(self, shapes):
        if not shapes:
            raise ValueError("union of no shapes")
        self.shapes = list(shapes)

    def sdf(self, q: np.ndarray) -> np.ndarray:
        return np.minimum.reduce([s.sdf(q) for s in self.shapes])

    def aabb(self):
        boxes = [s.aabb() for s in self.shapes]
        return (np.minimum.reduce([b[0] for b in boxes]),
                np.maximum.reduce([b[1] for b in boxes]))


def shape_from_config(cfg: dict):
    kind = cfg["type"]
    if kind == "sphere":
        return SphereShape(tuple(cfg.get("center", (0, 0, 0))), cfg["radius"])
    if kind == "ellipsoid":
        return EllipsoidShape(tuple(cfg.get("center", (0, 0, 0))), tuple(cfg["radii"]))
    if kind == "bumpy_sphere":
        return BumpySphereShape(
            tuple(cfg.get("center", (0, 0, 0))),
            cfg.get("radius", 0.09),
            cfg.get("bump_amplitude", 0.01),
            cfg.get("n_lobes", 4),
            cfg.get("seed", 0),
        )
    if kind == "union":
        return UnionShape([shape_from_config(c) for c in cfg["shapes"]])
    raise ValueError(f"unknown shape type {kind!r}")


# ---------------------------------------------------------------------------
# density sources (anything with .density(q) -> sigma >= 0 and .bounds)


class AnalyticDensity:
    """Soft-boundary density from an analytic SDF: sigma_max * sigmoid(-sdf/softness),
    zero outside the (dilated) shape bounds."""

    def __init__(self, shape, sigma_max=SIGMA_MAX_DEFAULT, softness=SOFTNESS_DEFAULT,
                 bounds=None):
        self.shape = shape
        self.sigma_max = float(sigma_max)
        self.softness = float(softness)
        self.bounds = tuple(map(np.asarray, bounds)) if bounds is not None else dilated_bounds(*shape.aabb())

    def density(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        sigma = self.sigma_max * expit(-self.shape.sdf(q) / self.softness)
        lo, hi = self.bounds
        inside = np.all((q >= lo) & (q <= hi), axis=-1)
        return np.where(inside, sigma, 0.0)


def analytic_density(shape, q, sigma_max=SIGMA_MAX_DEFAULT, softness=SOFTNESS_DEFAULT):
    """One-shot convenience wrapper around AnalyticDensity."""
    return AnalyticDensity(shape, sigma_max, softness).density(q)


class GridDensity:
    """Trilinearly interpolated voxel density, clamped at zero, zero outside bounds."""

    def __init__(self, values: np.ndarray, bounds):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError(f"density grid must be 3-D, got shape {values.shape}")
        self.values = values
        self.bounds = (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64))

    def density(self, q: np.ndarray) -> np.ndarray:
        vals, _, _, inside = trilinear_sample(self.values[..., None], self.bounds, q)
        return np.where(inside, np.maximum(vals[..., 0], 0.0), 0.0)

    @classmethod
    def from_source(cls, source, resolution: int) -> "GridDensity":
        lo, hi = source.bounds
        axes = [np.linspace(lo[a], hi[a], resolution) for a in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return cls(source.density(pts), (lo, hi))


def grid_density(grid: GridDensity, q: np.ndarray) -> np.ndarray:
    return grid.density(q)


# ---------------------------------------------------------------------------
# voxel grid file format: one-line JSON header + '\n' + raw little-endian f32,
# x varying fastest


def save_voxel_grid(path, values: np.ndarray, bounds) -> None:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 3:
        values = values[..., None]
    rx, ry, rz, channels = values.shape
    header = {
        "resolution": [rx, ry, rz],
        "bounds_min": [float(x) for x in bounds[0]],
        "bounds_max": [float(x) for x in bounds[1]],
        "channels": channels,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        # x fastest: iterate channels, z, y, x from slowest to fastest
        fh.write(np.ascontiguousarray(values.transpose(3, 2, 1, 0)).astype("<f4").tobytes())


def load_voxel_grid(path):
    """Returns (values (Rx,Ry,Rz,C) float64, (bounds_min, bounds_max))."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("ascii"))
        rx, ry, rz = header["resolution"]
        channels = header.get("channels", 1)
        raw = np.frombuffer(fh.read(), dtype="<f4")
    expected = rx * ry * rz * channels
    if raw.size != expected:
        raise ValueError(f"voxel payload has {raw.size} floats, expected {expected}")
    values = raw.reshape(channels, rz, ry, rx).transpose(3, 2, 1, 0).astype(np.float64)
    bounds = (np.array(header["bounds_min"]), np.array(header["bounds_max"]))
    return values, bounds


# ---------------------------------------------------------------------------
# latent diffusion


@dataclass(frozen=True)
class LatentCodes:
    """One latent row per mesh vertex; the same codes are shared across frames."""

    codes: np.ndarray

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.float64)
        if codes.ndim != 2:
            raise ValueError(f"codes must be (N,d), got {codes.shape}")
        object.__setattr__(self, "codes", codes)

    @property
    def dim(self) -> int:
        return self.codes.shape[1]


@dataclass(frozen=True)
class LatentVolume:
    grid: np.ndarray  # (R, R, R, d)
    bounds: tuple
    blur_passes: int


def _grid_spacing(bounds, shape3):
    lo, hi = bounds
    return (np.asarray(hi, dtype=np.float64) - np.asarray(lo, dtype=np.float64)) / (
        np.asarray(shape3) - 1
    )


def trilinear_sample(grid: np.ndarray, bounds, q: np.ndarray):
    """Trilinear interpolation of a (Rx,Ry,Rz,C) grid with nodes spanning bounds.

    Returns (values (...,C), flat node indices (...,8), weights (...,8),
    inside mask (...,)); outside points get zeros and zero weights.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    q = np.asarray(q, dtype=np.float64)
    shape3 = np.array(grid.shape[:3])
    h = _grid_spacing((lo, hi), shape3)
    f = (q - lo) / h
    inside = np.all((q >= lo) & (q <= hi), axis=-1)
    f = np.clip(f, 0.0, shape3 - 1.0)
    i0 = np.minimum(f.astype(np.int64), shape3 - 2)
    t = f - i0

    w = np.empty(q.shape[:-1] + (8,))
    idx = np.empty(q.shape[:-1] + (8,), dtype=np.int64)
    strides = np.array([grid.shape[1] * grid.shape[2], grid.shape[2], 1])
    base = i0 @ strides
    corner = 0
    for dx in (0, 1):
        wx = t[..., 0] if dx else 1.0 - t[..., 0]
        for dy in (0, 1):
            wy = t[..., 1] if dy else 1.0 - t[..., 1]
            for dz in (0, 1):
                wz = t[..., 2] if dz else 1.0 - t[..., 2]
                w[..., corner] = wx * wy * wz
                idx[..., corner] = base + dx * strides[0] + dy * strides[1] + dz
                corner += 1
    w = w * inside[..., None]
    flat = grid.reshape(-1, grid.shape[3])
    values = np.einsum("...k,...kc->...c", w, flat[idx])
    return values, idx, w, inside


class VertexSplat:
    """Normalized trilinear splat of per-vertex codes onto a regular grid.

    Linear in the codes; kept as a sparse matrix so training can apply the
    transpose during backpropagation.
    """

    def __init__(self, positions: np.ndarray, bounds, resolution: int):
        positions = np.asarray(positions, dtype=np.float64)
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        bad = np.nonzero(np.any((positions < lo) | (positions > hi), axis=1))[0]
        if bad.size:
            raise ValueError(f"vertex {bad[0]} at {positions[bad[0]]} lies outside splat bounds")
        self.bounds = (lo, hi)
        self.resolution = int(resolution)
        self.grid_shape = (resolution, resolution, resolution)
        n = len(positions)
        dummy = np.zeros(self.grid_shape + (1,))
        _, idx, w, _ = trilinear_sample(dummy, (lo, hi), positions)
        rows = idx.ravel()
        cols = np.repeat(np.arange(n), 8)
        raw = sp.coo_matrix((w.ravel(), (rows, cols)), shape=(resolution ** 3, n)).tocsr()
        cell_w = np.asarray(raw.sum(axis=1)).ravel()
        inv = np.where(cell_w > 0, 1.0 / np.where(cell_w > 0, cell_w, 1.0), 0.0)
        self.matrix = sp.diags(inv) @ raw

    def forward(self, codes: np.ndarray) -> np.ndarray:
        out = self.matrix @ codes
        return out.reshape(self.grid_shape + (codes.shape[1],))

    def backward(self, grad_grid: np.ndarray) -> np.ndarray:
        return self.matrix.T @ grad_grid.reshape(self.matrix.shape[0], -1)


def box_blur(grid: np.ndarray, passes: int) -> np.ndarray:
    """Separable 3-tap box blur per spatial axis, zero padded. Self-adjoint."""
    kernel = np.full(3, 1.0 / 3.0)
    out = grid
    for _ in range(passes):
        for axis in range(3):
            out = correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
    return out


def diffuse_latents(codes: LatentCodes, mesh: TriMesh,
                    resolution: int = DEFAULT_RESOLUTION,
                    blur_passes: int = DEFAULT_BLUR_PASSES,
                    bounds=None) -> LatentVolume:
    """Splat vertex codes into the bounding volume and diffuse by box blurring."""
    if not 16 <= resolution <= 256:
        raise ValueError(f"resolution must be in [16,256], got {resolution}")
    if codes.codes.shape[0] != mesh.n_vertices:
        raise ValueError("one latent code per vertex required")
    if bounds is None:
        bounds = dilated_bounds(*mesh.aabb())
    splat = VertexSplat(mesh.vertices, bounds, resolution)
    grid = box_blur(splat.forward(codes.codes), blur_passes)
    return LatentVolume(grid, splat.bounds, blur_passes)


def query_latent(volume: LatentVolume, q: np.ndarray) -> np.ndarray:
    """Trilinear latent lookup; zero vector outside the volume bounds."""
    values, _, _, _ = trilinear_sample(volume.grid, volume.bounds, q)
    return values
