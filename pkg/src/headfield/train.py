"""Gradient-based fitting of the radiance field and orchestration of the
two-phase pipeline (train, extract surface, refine mesh, retrain).

All gradients are hand-derived reverse mode: the computation graph (latent
splat + blur, trilinear query, two small MLPs, quadrature, MSE) is fixed, so
no autodiff framework is used.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .field import (LatentVolume, VertexSplat, box_blur, dilated_bounds,
                    save_voxel_grid, trilinear_sample)
from .mesh import TriMesh, cotangent_laplacian, mesh_l2_distance, save_mesh
from .morphable import HeadParams
from .refine import (PerturbConfig, build_sdf, cross_section,
                     extract_height_field, perturb_vertices)
from .render import (Camera, D_FREQS, Q_FREQS, RadianceField, FieldConfig,
                     FieldDensity, camera_rays, composite, image_metrics,
                     intersect_aabb, positional_encoding, sample_depths,
                     save_png, softplus)
from .scene import build_scene, resolve_scene_config
from .smooth import SmoothConfig, apply_refinement, smooth_displacements
from scipy.special import expit


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rays_per_step: int = 1024
    steps: int = 2000
    n_samples: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < b < 1.0:
                raise ValueError("Adam betas must lie in (0,1)")


@dataclass(frozen=True)
class Frame:
    image: np.ndarray
    camera: Camera
    params: HeadParams | None
    index: int

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(
                f"image shape {img.shape} does not match camera "
                f"{(self.camera.height, self.camera.width, 3)}"
            )
        object.__setattr__(self, "image", img)


class Adam:
    """Minimal Adam over a list of parameter arrays, updated in place."""

    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for a, m, v, g in zip(self.arrays, self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class FrameContext:
    """Per-frame precomputation: latent splat for the frame's mesh, pixel rays,
    their bounds intersections, and flattened target pixels."""

    def __init__(self, field: RadianceField, mesh: TriMesh, frame: Frame,
                 splat: VertexSplat | None = None):
        self.bounds = dilated_bounds(*mesh.aabb())
        self.splat = splat or VertexSplat(mesh.vertices, self.bounds, field.config.resolution)
        self.origins, self.dirs = camera_rays(frame.camera)
        self.t_near, self.t_far, hit = intersect_aabb(self.origins, self.dirs, self.bounds)
        self.hit_indices = np.nonzero(hit)[0]
        self.targets = frame.image.reshape(-1, 3)
        self.index = frame.index


@dataclass(frozen=True)
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    targets: np.ndarray


def _rebuild_volume(field: RadianceField, splat: VertexSplat) -> None:
    grid = box_blur(splat.forward(field.codes), field.config.blur_passes)
    field.volume = LatentVolume(grid, splat.bounds, field.config.blur_passes)


def _forward_backward(field: RadianceField, splat: VertexSplat, batch: RayBatch,
                      jitter, k: int, n_samples: int, compute_grads: bool = True):
    """MSE loss over a ray batch and its gradients w.r.t. every trainable
    parameter (codes, frame embeddings, both network weights)."""
    cfg = field.config
    bg = np.asarray(cfg.background, dtype=np.float64)
    _rebuild_volume(field, splat)
    vol = field.volume

    t, deltas = sample_depths(batch.t_near, batch.t_far, n_samples, jitter)
    pts = batch.origins[:, None, :] + t[..., None] * batch.dirs[:, None, :]
    lat, idx, w, _ = trilinear_sample(vol.grid, vol.bounds, pts)

    sig_raw, sig_acts = field.sigma_net.forward(lat)
    sigma = softplus(sig_raw[..., 0])

    dirs_b = np.broadcast_to(batch.dirs[:, None, :], pts.shape)
    emb = np.broadcast_to(field.frame_embeddings[k], pts.shape[:-1] + (cfg.embed_dim,))
    x = np.concatenate([lat, positional_encoding(pts, Q_FREQS),
                        positional_encoding(dirs_b, D_FREQS), emb], axis=-1)
    col_raw, col_acts = field.color_net.forward(x)
    colors = expit(col_raw)

    rgb, final_t, weights, trans_after = composite(sigma, colors, deltas, bg, return_aux=True)
    resid = rgb - batch.targets
    loss = float(np.mean(resid ** 2))
    if not compute_grads:
        return loss, None

    n_rays = len(batch.origins)
    d_rgb = 2.0 * resid / (n_rays * 3.0)

    # quadrature backward
    d_colors = weights[..., None] * d_rgb[:, None, :]
    wc = weights[..., None] * colors
    # tail_i = sum_{j>i} w_j c_j + T_final * bg  (everything the transmittance
    # after sample i still multiplies)
    suffix = np.cumsum(wc[:, ::-1, :], axis=1)[:, ::-1, :]
    tail = suffix - wc + final_t[:, None, None] * bg
    d_sigma = deltas * np.einsum("bnc,bc->bn", trans_after[..., None] * colors - tail, d_rgb)

    # density head
    d_sig_raw = (d_sigma * expit(sig_raw[..., 0]))[..., None]  # softplus'
    d_lat_sigma, sig_gw, sig_gb = field.sigma_net.backward(d_sig_raw, sig_acts)

    # color head
    d_col_raw = d_colors * colors * (1.0 - colors)  # sigmoid'
    d_x, col_gw, col_gb = field.color_net.backward(d_col_raw, col_acts)
    d_lat = d_lat_sigma + d_x[..., : cfg.latent_dim]
    if cfg.embed_dim:
        d_emb = d_x[..., -cfg.embed_dim:].reshape(-1, cfg.embed_dim).sum(axis=0)
    else:
        d_emb = np.zeros(0)

    # back through trilinear query, blur (self-adjoint), and splat
    d_grid_flat = np.zeros((vol.grid.shape[0] * vol.grid.shape[1] * vol.grid.shape[2],
                            cfg.latent_dim))
    np.add.at(d_grid_flat, idx.reshape(-1),
              (w[..., None] * d_lat[..., None, :]).reshape(-1, cfg.latent_dim))
    d_grid = box_blur(d_grid_flat.reshape(vol.grid.shape), cfg.blur_passes)
    d_codes = splat.backward(d_grid)

    d_embeddings = np.zeros_like(field.frame_embeddings)
    d_embeddings[k] = d_emb
    grads = [d_codes, d_embeddings] + sig_gw + sig_gb + col_gw + col_gb
    return loss, grads


def _sample_batch(ctx: FrameContext, rng: np.random.Generator, n_rays: int) -> RayBatch:
    pick = ctx.hit_indices[rng.integers(0, len(ctx.hit_indices), size=n_rays)]
    return RayBatch(ctx.origins[pick], ctx.dirs[pick], ctx.t_near[pick],
                    ctx.t_far[pick], ctx.targets[pick])


def train_phase(field: RadianceField, meshes, frames, cfg: TrainConfig):
    """Minibatch Adam on the ray MSE; one mesh anchors the latent codes per frame.

    Returns (field, loss history). Deterministic for a given seed.
    """
    if len(meshes) != len(frames):
        raise ValueError(f"{len(meshes)} meshes for {len(frames)} frames")
    contexts = []
    splat_cache = {}  # frames often share one mesh; reuse its splat
    for mesh, frame in zip(meshes, frames):
        ctx = FrameContext(field, mesh, frame, splat_cache.get(id(mesh)))
        splat_cache[id(mesh)] = ctx.splat
        contexts.append(ctx)
    params = field.parameter_arrays()
    adam = Adam(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for step in range(cfg.steps):
        k = step % len(frames)
        ctx = contexts[k]
        batch = _sample_batch(ctx, rng, cfg.rays_per_step)
        jitter = rng.random((cfg.rays_per_step, cfg.n_samples))
        loss, grads = _forward_backward(field, ctx.splat, batch, jitter, frames[k].index,
                                        cfg.n_samples)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss {loss} at step {step} (frame {k}); "
                f"code norm {np.linalg.norm(field.codes):.3e}"
            )
        adam.step(grads)
        history.append(loss)
    return field, history


def gradient_check(field: RadianceField, mesh: TriMesh, batch: RayBatch, k: int,
                   n_params: int = 100, h: float = 1e-5, seed: int = 0,
                   n_samples: int = 32) -> float:
    """Central finite differences versus the hand-derived gradients on a random
    parameter subset; returns the maximum relative error.

    The step must stay small enough that no ReLU pre-activation changes sign
    inside the +-h window; 1e-5 keeps the kink error below round-off here.
    """
    bounds = dilated_bounds(*mesh.aabb())
    splat = VertexSplat(mesh.vertices, bounds, field.config.resolution)
    jitter = 0.5  # fixed sample lattice so finite differences see a smooth loss

    _, grads = _forward_backward(field, splat, batch, jitter, k, n_samples)
    analytic = np.concatenate([g.ravel() for g in grads])

    flat = field.get_flat_params()
    rng = np.random.default_rng(seed)
    indices = rng.choice(flat.size, size=min(n_params, flat.size), replace=False)
    max_rel = 0.0
    for i in indices:
        saved = flat[i]
        flat[i] = saved + h
        field.set_flat_params(flat)
        loss_plus, _ = _forward_backward(field, splat, batch, jitter, k, n_samples,
                                         compute_grads=False)
        flat[i] = saved - h
        field.set_flat_params(flat)
        loss_minus, _ = _forward_backward(field, splat, batch, jitter, k, n_samples,
                                          compute_grads=False)
        flat[i] = saved
        fd = (loss_plus - loss_minus) / (2.0 * h)
        rel = abs(analytic[i] - fd) / max(abs(analytic[i]), abs(fd), 1e-6)
        max_rel = max(max_rel, rel)
    field.set_flat_params(flat)
    return max_rel


# ---------------------------------------------------------------------------
# two-phase pipeline


def _eval_embedding_index(n_train_frames: int) -> int:
    return n_train_frames  # extra untrained row reserved for held-out rendering


def _render_eval(field: RadianceField, splat: VertexSplat, camera: Camera,
                 n_samples: int, k_eval: int, threads: int) -> np.ndarray:
    from .render import render_image

    _rebuild_volume(field, splat)
    return render_image(field, camera, n_samples, k_eval, threads=threads, stratified=False)


def _evaluate_split(field, splat, cameras, images, n_samples, k_eval, threads):
    per_frame = []
    renders = []
    for camera, target in zip(cameras, images):
        img = _render_eval(field, splat, camera, n_samples, k_eval, threads)
        renders.append(img)
        per_frame.append(image_metrics(img, target))
    finite_psnr = [m["psnr"] for m in per_frame if m["psnr"] != "inf"]
    mean = {
        "l1": float(np.mean([m["l1"] for m in per_frame])),
        "psnr": float(np.mean(finite_psnr)) if finite_psnr else "inf",
        "ssim": float(np.mean([m["ssim"] for m in per_frame])),
    }
    return {"mean": mean, "per_frame": per_frame}, renders


def _laplacian_energy(laplacian, displacement: np.ndarray) -> float:
    return float(sum(displacement[:, c] @ (laplacian @ displacement[:, c]) for c in range(3)))


def ablation_label(perturb: bool, smooth: bool) -> str:
    if perturb and smooth:
        return "Full model"
    if perturb:
        return "w/o Smo."
    if smooth:
        return "w/o Per."
    return "w/o Per. + Smo."


def run_pipeline(scene_config, out_dir, threads: int = 1) -> dict:
    """End-to-end run: phase-one training, height-field extraction, SDF mesh
    refinement with displacement smoothing, phase-two training, and held-out
    evaluation. Writes report.json, refined OBJ, PNGs, and diagnostics into
    out_dir and returns the report."""
    cfg = resolve_scene_config(scene_config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved-config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)

    # pin BLAS pools so results do not depend on worker counts
    with threadpool_limits(limits=1):
        return _run_pipeline_inner(cfg, out_dir, threads)


def _run_pipeline_inner(cfg: dict, out_dir: Path, threads: int) -> dict:
    scene = build_scene(cfg)
    template = scene.template
    n_train = len(scene.train_cameras)
    k_eval = _eval_embedding_index(n_train)

    field_cfg = FieldConfig(
        latent_dim=cfg["field"]["latent_dim"],
        embed_dim=cfg["field"]["embed_dim"],
        hidden=cfg["field"]["hidden"],
        resolution=cfg["field"]["resolution"],
        blur_passes=cfg["field"]["blur_passes"],
        background=tuple(cfg["render"]["background"]),
    )
    field = RadianceField(field_cfg, template.n_vertices, n_train + 1, seed=cfg["seed"])

    train_frames = [Frame(img, cam, None, i)
                    for i, (img, cam) in enumerate(zip(scene.train_images, scene.train_cameras))]
    tc = cfg["train"]
    n_samples = cfg["render"]["n_samples"]

    def phase_config(steps: int) -> TrainConfig:
        return TrainConfig(lr=tc["lr"], adam_beta1=tc["adam_beta1"], adam_beta2=tc["adam_beta2"],
                           adam_eps=tc["adam_eps"], rays_per_step=tc["rays_per_step"],
                           steps=steps, n_samples=n_samples, seed=tc["seed"])

    report = {"name": cfg["name"],
              "ablation": ablation_label(cfg["ablation"]["perturb"], cfg["ablation"]["smooth"])}

    # --- phase one: train on the template geometry
    meshes1 = [template] * n_train
    field, hist1 = train_phase(field, meshes1, train_frames, phase_config(tc["steps_phase1"]))
    field.frame_embeddings[k_eval] = field.frame_embeddings[:n_train].mean(axis=0)

    splat1 = VertexSplat(template.vertices, dilated_bounds(*template.aabb()),
                         field_cfg.resolution)
    phase1_metrics, renders1 = _evaluate_split(field, splat1, scene.test_cameras,
                                               scene.test_images, n_samples, k_eval, threads)
    for i, img in enumerate(renders1):
        save_png(out_dir / f"phase1_test{i}.png", img)
    report["phase1"] = {"loss_first": hist1[0] if hist1 else None,
                        "loss_last": hist1[-1] if hist1 else None,
                        "test": phase1_metrics}

    # --- geometry bootstrap from the trained density
    _rebuild_volume(field, splat1)
    density = FieldDensity(field)
    hf_cfg = cfg["heightfield"]
    height_field = extract_height_field(density, tuple(hf_cfg["resolution"]),
                                        tau=hf_cfg["tau"], n_steps=hf_cfg["n_steps"])
    save_voxel_grid(out_dir / "heightfield.vox",
                    np.where(np.isfinite(height_field.depths), height_field.depths, 0.0)[..., None],
                    (np.array([height_field.x_coords[0], height_field.y_coords[0], 0.0]),
                     np.array([height_field.x_coords[-1], height_field.y_coords[-1], 0.0])))

    laplacian = cotangent_laplacian(template)
    p_cfg = cfg["perturb"]
    epsilon = p_cfg["epsilon"]
    if epsilon is None:
        lo, hi = template.aabb()
        epsilon = 0.01 * float(np.linalg.norm(hi - lo))
    if cfg["ablation"]["perturb"] and height_field.n_valid() > 0:
        sdf = build_sdf(height_field)
        save_mesh(sdf.mesh, out_dir / "heightfield_surface.obj")
        perturb_cfg = PerturbConfig(p_cfg["m_samples"], p_cfg["ray_extent"], epsilon)
        displacements = perturb_vertices(template, sdf, perturb_cfg)
    else:
        displacements = np.zeros_like(template.vertices)
    raw_energy = _laplacian_energy(laplacian, displacements)

    s_cfg = cfg["smooth"]
    if cfg["ablation"]["smooth"]:
        smoothed = smooth_displacements(
            laplacian, displacements,
            SmoothConfig(s_cfg["lam"], s_cfg["iterations"], s_cfg["cg_tol"]))
    else:
        smoothed = displacements
    smoothed_energy = _laplacian_energy(laplacian, smoothed)
    refined = apply_refinement(template, smoothed)
    save_mesh(refined, out_dir / "refined.obj")

    rows = cross_section(template, template.vertices + displacements, height_field,
                         x_slab=cfg["cross_section_x"])
    with open(out_dir / "cross_section.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "y", "z"])
        writer.writerows(rows)

    report["displacement"] = {
        "max_abs": float(np.abs(displacements).max()),
        "raw_laplacian_energy": raw_energy,
        "smoothed_laplacian_energy": smoothed_energy,
    }
    if scene.gt_mesh is not None:
        report["mesh_l2"] = {
            "template_to_truth": mesh_l2_distance(template, scene.gt_mesh),
            "refined_to_truth": mesh_l2_distance(refined, scene.gt_mesh),
        }

    # --- phase two: retrain on the refined geometry
    if not tc["warm_start"]:
        field = RadianceField(field_cfg, template.n_vertices, n_train + 1, seed=cfg["seed"])
    meshes2 = [refined] * n_train
    field, hist2 = train_phase(field, meshes2, train_frames, phase_config(tc["steps_phase2"]))
    field.frame_embeddings[k_eval] = field.frame_embeddings[:n_train].mean(axis=0)

    splat2 = VertexSplat(refined.vertices, dilated_bounds(*refined.aabb()),
                         field_cfg.resolution)
    phase2_metrics, renders2 = _evaluate_split(field, splat2, scene.test_cameras,
                                               scene.test_images, n_samples, k_eval, threads)
    for i, img in enumerate(renders2):
        save_png(out_dir / f"phase2_test{i}.png", img)
    report["phase2"] = {"loss_first": hist2[0] if hist2 else None,
                        "loss_last": hist2[-1] if hist2 else None,
                        "test": phase2_metrics}

    field.save(out_dir / "field.npz")
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report
