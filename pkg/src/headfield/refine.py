"""Geometry bootstrapping from a density field: 2.5D height-field extraction,
signed distance queries against the extracted surface, and normal-direction
vertex perturbation gated by frontal confidence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh, TriangleIndex, vertex_normals

FRONTAL_AXIS = np.array([0.0, 0.0, 1.0])  # +z is the frontal / camera direction


@dataclass(frozen=True)
class HeightField:
    """Surface depth h(x,y) over a frontal-plane grid; NaN where no surface was found."""

    depths: np.ndarray      # (Rx, Ry)
    x_coords: np.ndarray    # (Rx,) cell-center x positions
    y_coords: np.ndarray    # (Ry,)
    z_range: tuple          # (z_min, z_max) of the marched volume

    @property
    def cell_size(self) -> tuple:
        return (float(self.x_coords[1] - self.x_coords[0]) if len(self.x_coords) > 1 else 0.0,
                float(self.y_coords[1] - self.y_coords[0]) if len(self.y_coords) > 1 else 0.0)

    def n_valid(self) -> int:
        return int(np.isfinite(self.depths).sum())

    def interp_depth(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Bilinear depth lookup; falls back to the nearest valid cell where the
        footprint is NaN or the query lies outside the grid."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        valid = np.isfinite(self.depths)
        if not valid.any():
            raise ValueError("height field has no valid cells")
        dx, dy = self.cell_size
        fx = np.clip((x - self.x_coords[0]) / dx if dx else 0.0, 0, len(self.x_coords) - 1)
        fy = np.clip((y - self.y_coords[0]) / dy if dy else 0.0, 0, len(self.y_coords) - 1)
        i0 = np.minimum(fx.astype(np.int64), len(self.x_coords) - 2) if len(self.x_coords) > 1 else np.zeros_like(fx, dtype=np.int64)
        j0 = np.minimum(fy.astype(np.int64), len(self.y_coords) - 2) if len(self.y_coords) > 1 else np.zeros_like(fy, dtype=np.int64)
        tx = fx - i0
        ty = fy - j0
        h = (self.depths[i0, j0] * (1 - tx) * (1 - ty)
             + self.depths[np.minimum(i0 + 1, len(self.x_coords) - 1), j0] * tx * (1 - ty)
             + self.depths[i0, np.minimum(j0 + 1, len(self.y_coords) - 1)] * (1 - tx) * ty
             + self.depths[np.minimum(i0 + 1, len(self.x_coords) - 1),
                           np.minimum(j0 + 1, len(self.y_coords) - 1)] * tx * ty)
        bad = ~np.isfinite(h)
        if bad.any():
            vi, vj = np.nonzero(valid)
            tree = cKDTree(np.stack([self.x_coords[vi], self.y_coords[vj]], axis=1))
            _, nearest = tree.query(np.stack([x[bad], y[bad]], axis=-1))
            h = np.where(bad, 0.0, h)
            h[bad] = self.depths[vi[nearest], vj[nearest]]
        return h

    def to_mesh(self) -> TriMesh:
        """Triangulate valid cells, two triangles per fully valid quad; CCW from +z."""
        valid = np.isfinite(self.depths)
        if not valid.any():
            raise ValueError("height field has no valid cells")
        rx, ry = self.depths.shape
        index = -np.ones((rx, ry), dtype=np.int64)
        vi, vj = np.nonzero(valid)
        index[vi, vj] = np.arange(len(vi))
        verts = np.stack([self.x_coords[vi], self.y_coords[vj], self.depths[vi, vj]], axis=1)
        quad = valid[:-1, :-1] & valid[1:, :-1] & valid[1:, 1:] & valid[:-1, 1:]
        qi, qj = np.nonzero(quad)
        a = index[qi, qj]
        b = index[qi + 1, qj]
        c = index[qi + 1, qj + 1]
        d = index[qi, qj + 1]
        faces = np.concatenate([np.stack([a, b, c], axis=1), np.stack([a, c, d], axis=1)])
        return TriMesh(verts, faces)


def extract_height_field(density, resolution=(256, 256), tau: float = 0.5,
                         n_steps: int = 256, bounds=None) -> HeightField:
    """March rays front-to-back (from +z) and record where accumulated
    transmittance first drops below tau; NaN where it never does.

    The crossing depth is linearly interpolated between the bracketing samples.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0,1), got {tau}")
    lo, hi = bounds if bounds is not None else density.bounds
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    rx, ry = resolution
    xs = lo[0] + (np.arange(rx) + 0.5) * (hi[0] - lo[0]) / rx
    ys = lo[1] + (np.arange(ry) + 0.5) * (hi[1] - lo[1]) / ry
    dz = (hi[2] - lo[2]) / n_steps
    zs = hi[2] - (np.arange(n_steps) + 0.5) * dz  # descending, front to back

    depths = np.full((rx, ry), np.nan)
    chunk = max(1, int(2e6 // (ry * n_steps)))  # bound peak memory
    for start in range(0, rx, chunk):
        xs_c = xs[start: start + chunk]
        pts = np.empty((len(xs_c), ry, n_steps, 3))
        pts[..., 0] = xs_c[:, None, None]
        pts[..., 1] = ys[None, :, None]
        pts[..., 2] = zs[None, None, :]
        sigma = density.density(pts)
        trans = np.exp(-np.cumsum(sigma * dz, axis=-1))
        below = trans < tau
        crossed = below.any(axis=-1)
        j = np.argmax(below, axis=-1)
        ii, jj = np.nonzero(crossed)
        jc = j[ii, jj]
        t_after = trans[ii, jj, jc]
        t_before = np.where(jc > 0, trans[ii, jj, np.maximum(jc - 1, 0)], 1.0)
        # trans[j] integrates density through the whole bin around zs[j], so it
        # belongs to the bin's far end, half a step past the sample
        z_after = zs[jc] - 0.5 * dz
        z_before = np.where(jc > 0, zs[np.maximum(jc - 1, 0)] - 0.5 * dz, hi[2])
        frac = (tau - t_before) / (t_after - t_before)
        depths[start + ii, jj] = z_before + frac * (z_after - z_before)
    return HeightField(depths, xs, ys, (float(lo[2]), float(hi[2])))


class SdfSurface:
    """Signed distance to a triangulated height field.

    Magnitude is the exact distance to the nearest triangle; sign is positive
    in front of (above, +z) the interpolated height and negative behind it.
    """

    def __init__(self, height_field: HeightField):
        if height_field.n_valid() == 0:
            raise ValueError("cannot build an SDF from an empty height field")
        self.height_field = height_field
        self.mesh = height_field.to_mesh()
        self._index = TriangleIndex(self.mesh)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dist = self._index.query(p)
        h = self.height_field.interp_depth(p[:, 0], p[:, 1])
        sign = np.where(p[:, 2] > h, 1.0, -1.0)
        out = sign * dist
        return out if np.asarray(points).ndim > 1 else out[0]


def build_sdf(height_field: HeightField) -> SdfSurface:
    return SdfSurface(height_field)


def frontal_confidence(normal: np.ndarray) -> np.ndarray:
    """ReLU of the normal's alignment with the frontal (+z) axis."""
    return np.maximum(0.0, np.asarray(normal) @ FRONTAL_AXIS)


@dataclass(frozen=True)
class PerturbConfig:
    m_samples: int = 32
    ray_extent: float = 0.03  # meters, max offset along the normal at full confidence
    epsilon: float = 0.005    # SDF acceptance threshold, meters

    def __post_init__(self):
        if self.m_samples < 2:
            raise ValueError("m_samples must be >= 2")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def step(self) -> float:
        """Sample spacing along a fully frontal ray."""
        return 2.0 * self.ray_extent / self.m_samples


def perturb_vertices(mesh: TriMesh, sdf: SdfSurface, cfg: PerturbConfig) -> np.ndarray:
    """Per-vertex displacement toward the SDF zero set, along the vertex normal.

    Each vertex samples the SDF on a fixed lattice of m points spanning
    +-(confidence * ray_extent) along its normal (the ray starts at the outward
    offset and runs inward). The offset with minimum |SDF| wins; if even that
    magnitude exceeds epsilon, the field is considered noisy there and the
    vertex stays put. Back-facing vertices (confidence 0) never move.
    """
    normals = vertex_normals(mesh)
    conf = frontal_confidence(normals)
    out = np.zeros_like(mesh.vertices)
    active = np.nonzero(conf > 0)[0]
    if len(active) == 0:
        return out
    half = conf[active] * cfg.ray_extent  # (A,)
    m = cfg.m_samples
    lattice = -1.0 + (2.0 * np.arange(m) + 1.0) / m  # midpoints of m bins over [-1, 1]
    t = half[:, None] * lattice[None, :]  # (A, m), outward-most first to inner-most
    pts = mesh.vertices[active, None, :] + t[..., None] * normals[active, None, :]
    s = sdf.signed_distance(pts.reshape(-1, 3)).reshape(len(active), m)
    best = np.argmin(np.abs(s), axis=1)
    rows = np.arange(len(active))
    displacement = t[rows, best]
    displacement = np.where(np.abs(s[rows, best]) > cfg.epsilon, 0.0, displacement)
    out[active] = displacement[:, None] * normals[active]
    return out


def cross_section(mesh: TriMesh, perturbed: np.ndarray, height_field: HeightField,
                  x_slab: float = 0.0, slab_width: float | None = None):
    """(y, z) samples of the template, the perturbed vertices, and the extracted
    surface near a given x slab; for cross-section diagnostics.

    Returns a list of (kind, y, z) rows.
    """
    if slab_width is None:
        slab_width = 2.0 * (height_field.cell_size[0] or 1e-3)
    rows = []
    in_slab = np.abs(mesh.vertices[:, 0] - x_slab) <= slab_width
    for y, z in mesh.vertices[in_slab][:, 1:]:
        rows.append(("template", float(y), float(z)))
    for y, z in perturbed[in_slab][:, 1:]:
        rows.append(("perturbed", float(y), float(z)))
    i = int(np.argmin(np.abs(height_field.x_coords - x_slab)))
    for j, y in enumerate(height_field.y_coords):
        z = height_field.depths[i, j]
        if np.isfinite(z):
            rows.append(("surface", float(y), float(z)))
    return rows
