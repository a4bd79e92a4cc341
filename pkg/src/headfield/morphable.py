"""Linear blend-skinned blendshape head model, a synthetic stand-in generator, and file I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra
from scipy.spatial.transform import Rotation

from .mesh import TriMesh, MeshError

N_JOINTS = 4  # neck, jaw, left eye, right eye
# parent of each joint in the kinematic chain; -1 is the global root transform
JOINT_PARENTS = (-1, 0, 0, 0)
JOINT_NAMES = ("neck", "jaw", "eye_left", "eye_right")
POSE_DIM = 3 * N_JOINTS + 3


@dataclass(frozen=True)
class HeadParams:
    """Shape / pose / expression coefficients. Pose is axis-angle, radians:
    theta[:3] is the global rotation, theta[3+3j:6+3j] belongs to joint j."""

    beta: np.ndarray
    theta: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).ravel()
        theta = np.asarray(self.theta, dtype=np.float64).ravel()
        psi = np.asarray(self.psi, dtype=np.float64).ravel()
        if theta.size != POSE_DIM:
            raise ValueError(f"theta must have length {POSE_DIM}, got {theta.size}")
        for arr, name in ((beta, "beta"), (theta, "theta"), (psi, "psi")):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        if np.any(np.linalg.norm(theta.reshape(-1, 3), axis=1) >= np.pi):
            raise ValueError("per-joint rotation magnitude must be < pi")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "psi", psi)

    @classmethod
    def zeros(cls, n_shape: int, n_expr: int) -> "HeadParams":
        return cls(np.zeros(n_shape), np.zeros(POSE_DIM), np.zeros(n_expr))


@dataclass(frozen=True)
class BlendshapeModel:
    """Template mesh plus linear shape/pose/expression bases and skinning data.

    Basis tensors are (N, 3, n_components); skin_weights is (N, J) with rows
    summing to 1; joints are rest-pose positions (J, 3).
    """

    template: TriMesh
    shape_basis: np.ndarray
    pose_basis: np.ndarray
    expr_basis: np.ndarray
    skin_weights: np.ndarray
    joints: np.ndarray

    def __post_init__(self):
        n = self.template.n_vertices
        for name in ("shape_basis", "pose_basis", "expr_basis"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape[:2] != (n, 3):
                raise ValueError(f"{name} must be (N,3,k) with N={n}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        w = np.asarray(self.skin_weights, dtype=np.float64)
        if w.shape != (n, N_JOINTS):
            raise ValueError(f"skin_weights must be ({n},{N_JOINTS}), got {w.shape}")
        if w.min() < -1e-9 or w.max() > 1 + 1e-9 or np.abs(w.sum(axis=1) - 1).max() > 1e-6:
            raise ValueError("skin_weights must lie in [0,1] with rows summing to 1")
        j = np.asarray(self.joints, dtype=np.float64)
        if j.shape != (N_JOINTS, 3):
            raise ValueError(f"joints must be ({N_JOINTS},3), got {j.shape}")
        object.__setattr__(self, "skin_weights", w)
        object.__setattr__(self, "joints", j)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[2]

    def zero_params(self) -> HeadParams:
        return HeadParams.zeros(self.n_shape, self.n_expr)


def _joint_world_transforms(theta: np.ndarray, joints: np.ndarray):
    """World (R, t) per joint from axis-angle pose, chained through JOINT_PARENTS."""
    r_global = Rotation.from_rotvec(theta[:3]).as_matrix()
    world = []
    for j in range(N_JOINTS):
        r_local = Rotation.from_rotvec(theta[3 + 3 * j: 6 + 3 * j]).as_matrix()
        pivot = joints[j]
        # local map: x -> R (x - pivot) + pivot
        r, t = r_local, pivot - r_local @ pivot
        parent = JOINT_PARENTS[j]
        pr, pt = (r_global, np.zeros(3)) if parent < 0 else world[parent]
        world.append((pr @ r, pr @ t + pt))
    return world


def evaluate_model(model: BlendshapeModel, params: HeadParams) -> TriMesh:
    """Posed mesh: skinning applied to template + linear shape/pose/expression offsets."""
    if params.beta.size != model.n_shape:
        raise ValueError(f"beta has length {params.beta.size}, model expects {model.n_shape}")
    if params.psi.size != model.n_expr:
        raise ValueError(f"psi has length {params.psi.size}, model expects {model.n_expr}")
    shaped = (
        model.template.vertices
        + model.shape_basis @ params.beta
        + model.pose_basis @ params.theta[3:]
        + model.expr_basis @ params.psi
    )
    world = _joint_world_transforms(params.theta, model.joints)
    out = np.zeros_like(shaped)
    for j, (r, t) in enumerate(world):
        out += model.skin_weights[:, j:j + 1] * (shaped @ r.T + t)
    return model.template.with_vertices(out)


def icosphere(n_subdiv: int, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron with 10*4^k + 2 vertices, CCW outward winding."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    for _ in range(n_subdiv):
        midpoint = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriMesh(np.array(verts) * radius, np.array(faces, dtype=np.int64))


def _remove_neck_opening(mesh: TriMesh, y_cut: float) -> TriMesh:
    """Drop faces entirely below y_cut and any vertices left unreferenced."""
    keep = ~np.all(mesh.vertices[mesh.faces][:, :, 1] < y_cut, axis=1)
    faces = mesh.faces[keep]
    used = np.unique(faces)
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(mesh.vertices[used], remap[faces])


def _spherical_bumps(dirs: np.ndarray, rng: np.random.Generator, n_lobes: int = 3) -> np.ndarray:
    """Band-limited scalar bump pattern over unit directions."""
    out = np.zeros(len(dirs))
    for _ in range(n_lobes):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        freq = rng.uniform(2.0, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.5, 1.0) * np.cos(freq * np.pi * (dirs @ axis) + phase)
    return out


def _geodesic_distances(mesh: TriMesh, sources: np.ndarray) -> np.ndarray:
    """Edge-graph geodesic distances from each source vertex; (len(sources), N)."""
    f = mesh.faces
    i = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    j = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    w = np.linalg.norm(mesh.vertices[i] - mesh.vertices[j], axis=1)
    n = mesh.n_vertices
    graph = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
    return dijkstra(graph.tocsr(), directed=False, indices=sources)


HEAD_RADIUS = 0.09  # meters


def generate_synthetic_model(seed: int, n_subdiv: int) -> BlendshapeModel:
    """Deterministic synthetic head: icosphere template at head scale with the
    neck opening removed, band-limited bump bases, jaw-localized pose
    correctives, and geodesic-falloff skin weights.
    """
    if not 1 <= n_subdiv <= 5:
        raise ValueError(f"n_subdiv must be in [1,5], got {n_subdiv}")
    rng = np.random.default_rng(seed)
    r = HEAD_RADIUS
    template = _remove_neck_opening(icosphere(n_subdiv, r), y_cut=-0.72 * r)
    n = template.n_vertices
    dirs = template.vertices / np.linalg.norm(template.vertices, axis=1, keepdims=True)

    def bump_basis(n_cols: int, amplitude: float) -> np.ndarray:
        basis = np.zeros((n, 3, n_cols))
        for c in range(n_cols):
            basis[:, :, c] = amplitude * _spherical_bumps(dirs, rng)[:, None] * dirs
        return basis - basis.mean(axis=0, keepdims=True)

    shape_basis = bump_basis(8, 0.004)
    expr_basis = bump_basis(6, 0.004)

    joints = np.array([
        [0.0, -0.08, 0.0],   # neck
        [0.0, -0.03, 0.04],  # jaw
        [-0.03, 0.02, 0.07],
        [0.03, 0.02, 0.07],
    ]) * (r / 0.09)

    # pose correctives concentrated around the jaw
    jaw_falloff = np.exp(-np.linalg.norm(template.vertices - joints[1], axis=1) ** 2 / (0.04 * r / 0.09) ** 2)
    pose_basis = np.zeros((n, 3, POSE_DIM - 3))
    for c in range(POSE_DIM - 3):
        pattern = _spherical_bumps(dirs, rng) * jaw_falloff
        pose_basis[:, :, c] = 0.002 * pattern[:, None] * dirs
    pose_basis -= pose_basis.mean(axis=0, keepdims=True)

    sources = np.array([np.argmin(np.linalg.norm(template.vertices - jt, axis=1)) for jt in joints])
    geo = _geodesic_distances(template, sources)  # (J, N)
    weights = np.exp(-(geo.T / (0.6 * r / 0.09)) ** 2)
    weights /= weights.sum(axis=1, keepdims=True)

    return BlendshapeModel(template, shape_basis, pose_basis, expr_basis, weights, joints)


def save_model(model: BlendshapeModel, directory) -> None:
    """Write a model as manifest.json plus raw little-endian f64 row-major blobs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = {
        "template_vertices": model.template.vertices,
        "faces": model.template.faces.astype(np.float64),
        "shape_basis": model.shape_basis,
        "pose_basis": model.pose_basis,
        "expr_basis": model.expr_basis,
        "skin_weights": model.skin_weights,
        "joints": model.joints,
    }
    manifest = {"format": "headfield-blendshape-v1", "blobs": {}}
    for name, arr in blobs.items():
        fname = f"{name}.f64"
        arr.astype("<f8").tofile(directory / fname)
        manifest["blobs"][name] = {"file": fname, "shape": list(arr.shape)}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_model(manifest_path) -> BlendshapeModel:
    """Load a model saved by save_model (or FLAME-format arrays repacked the same way)."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = manifest_path.parent
    arrays = {}
    for name, entry in manifest["blobs"].items():
        arr = np.fromfile(base / entry["file"], dtype="<f8")
        arrays[name] = arr.reshape(entry["shape"])
    template = TriMesh(arrays["template_vertices"], arrays["faces"].astype(np.int64))
    return BlendshapeModel(
        template,
        arrays["shape_basis"],
        arrays["pose_basis"],
        arrays["expr_basis"],
        arrays["skin_weights"],
        arrays["joints"],
    )
