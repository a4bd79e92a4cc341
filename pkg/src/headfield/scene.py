"""Synthetic scene construction: analytic density + color oracles, camera rigs,
and noise-free target rendering for training and evaluation."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import AnalyticDensity, shape_from_config
from .mesh import TriMesh
from .morphable import generate_synthetic_model, icosphere
from .render import Camera, camera_rays, composite, intersect_aabb, sample_depths

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

DEFAULT_SCENE = {
    "name": "scene",
    "seed": 0,
    "shape": {"type": "bumpy_sphere", "radius": 0.09, "bump_amplitude": 0.012,
              "n_lobes": 4, "seed": 3},
    "density": {"sigma_max": 200.0, "softness": 0.005},
    "template": {"type": "icosphere", "radius": 0.09, "n_subdiv": 3},
    "cameras": {"count_train": 20, "count_test": 5, "distance": 0.35,
                "fov_x_deg": 34.0, "width": 48, "height": 48, "max_angle_deg": 45.0},
    "field": {"resolution": 40, "blur_passes": 4, "latent_dim": 16,
              "embed_dim": 8, "hidden": 64},
    "render": {"n_samples": 32, "n_samples_target": 64, "background": [0.0, 0.0, 0.0]},
    "train": {"steps_phase1": 1000, "steps_phase2": 600, "rays_per_step": 1024,
              "lr": 5e-4, "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8,
              "seed": 0, "warm_start": True},
    "heightfield": {"resolution": [128, 128], "tau": 0.5, "n_steps": 256},
    "perturb": {"m_samples": 32, "ray_extent": 0.03, "epsilon": None},
    "smooth": {"lam": 0.05, "iterations": 10, "cg_tol": 1e-8},
    "ablation": {"perturb": True, "smooth": True},
    "gt_mesh_subdiv": 4,
    "cross_section_x": 0.0,
}


def _merge(defaults: dict, override: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_scene_config(config) -> dict:
    """Fill a (possibly partial) scene config with defaults; accepts dict or JSON path."""
    if not isinstance(config, dict):
        with open(config) as fh:
            config = json.load(fh)
    return _merge(DEFAULT_SCENE, config)


def direction_palette(center=(0.0, 0.0, 0.0)):
    """View-independent surface coloring: RGB from the unit direction out of center."""
    center = np.asarray(center, dtype=np.float64)

    def color(q: np.ndarray) -> np.ndarray:
        p = np.asarray(q, dtype=np.float64) - center
        norm = np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)
        return 0.5 + 0.5 * p / norm

    return color


def spiral_cameras(count: int, distance: float, max_angle_deg: float,
                   fov_x_deg: float, width: int, height: int,
                   phase: float = 0.0, target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Deterministic camera rig on a spherical spiral cap around the +z axis."""
    cams = []
    for i in range(count):
        theta = np.deg2rad(max_angle_deg) * np.sqrt((i + 0.5) / count)
        phi = i * GOLDEN_ANGLE + phase
        direction = np.array([
            np.sin(theta) * np.cos(phi),
            np.sin(theta) * np.sin(phi),
            np.cos(theta),
        ])
        eye = np.asarray(target) + distance * direction
        cams.append(Camera.look_at(eye, target, fov_x_deg=fov_x_deg, width=width, height=height))
    return cams


def render_analytic_image(density, color_fn, camera: Camera, n_samples: int,
                          background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Noise-free reference render of an analytic scene (midpoint quadrature)."""
    origins, dirs = camera_rays(camera)
    tn, tf, hit = intersect_aabb(origins, dirs, density.bounds)
    out = np.tile(np.asarray(background, dtype=np.float64), (len(origins), 1))
    if hit.any():
        t, deltas = sample_depths(tn[hit], tf[hit], n_samples, 0.5)
        pts = origins[hit][:, None, :] + t[..., None] * dirs[hit][:, None, :]
        sigma = density.density(pts)
        colors = color_fn(pts)
        out[hit], _, _ = composite(sigma, colors, deltas, background)
    return out.reshape(camera.height, camera.width, 3)


def template_from_config(cfg: dict) -> TriMesh:
    kind = cfg.get("type", "icosphere")
    if kind == "icosphere":
        return icosphere(cfg.get("n_subdiv", 3), cfg.get("radius", 0.09))
    if kind == "synthetic_model":
        return generate_synthetic_model(cfg.get("seed", 0), cfg.get("n_subdiv", 3)).template
    raise ValueError(f"unknown template type {kind!r}")


@dataclass
class SceneData:
    config: dict
    shape: object
    density: AnalyticDensity
    color_fn: object
    template: TriMesh
    gt_mesh: TriMesh | None
    train_cameras: list
    test_cameras: list
    train_images: list
    test_images: list


def build_scene(config) -> SceneData:
    """Materialize a synthetic scene: analytic oracle, template mesh, cameras,
    and rendered target images for both splits."""
    cfg = resolve_scene_config(config)
    shape = shape_from_config(cfg["shape"])
    density = AnalyticDensity(shape, cfg["density"]["sigma_max"], cfg["density"]["softness"])
    color_fn = direction_palette(cfg["shape"].get("center", (0.0, 0.0, 0.0)))
    template = template_from_config(cfg["template"])
    gt_mesh = shape.surface_mesh(cfg["gt_mesh_subdiv"]) if hasattr(shape, "surface_mesh") else None

    cam = cfg["cameras"]
    train_cams = spiral_cameras(cam["count_train"], cam["distance"], cam["max_angle_deg"],
                                cam["fov_x_deg"], cam["width"], cam["height"])
    test_cams = spiral_cameras(cam["count_test"], cam["distance"], cam["max_angle_deg"] * 0.8,
                               cam["fov_x_deg"], cam["width"], cam["height"],
                               phase=0.5 * GOLDEN_ANGLE)
    n_tgt = cfg["render"]["n_samples_target"]
    bg = tuple(cfg["render"]["background"])
    train_images = [render_analytic_image(density, color_fn, c, n_tgt, bg) for c in train_cams]
    test_images = [render_analytic_image(density, color_fn, c, n_tgt, bg) for c in test_cams]
    return SceneData(cfg, shape, density, color_fn, template, gt_mesh,
                     train_cams, test_cams, train_images, test_images)
