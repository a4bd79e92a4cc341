"""Radiance field evaluation and volume rendering: positional encodings, small
MLPs for density and color, quadrature along rays, image synthesis, and image
metrics (L1 / PSNR / SSIM)."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image
from scipy.signal import convolve2d
from scipy.special import expit

from .field import LatentVolume, trilinear_sample, LATENT_DIM, DEFAULT_RESOLUTION, DEFAULT_BLUR_PASSES

Q_FREQS = 10  # positional encoding frequencies for the query point
D_FREQS = 4   # and for the view direction
EMBED_DIM = 8
RENDER_CHUNK = 8192  # rays per chunk; fixed so results are thread-count independent


def positional_encoding(x: np.ndarray, n_freq: int) -> np.ndarray:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(...)] per component."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for l in range(n_freq):
        ang = (2.0 ** l) * np.pi * x
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    return np.concatenate(parts, axis=-1)


def encoding_dim(dim: int, n_freq: int) -> int:
    return dim * (1 + 2 * n_freq)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


class MLP:
    """Plain fully connected net with ReLU hidden layers and a linear head.

    Forward returns an activation cache; backward consumes it and produces
    input and parameter gradients. Used instead of an autodiff framework: the
    topology is fixed and tiny.
    """

    def __init__(self, sizes, rng: np.random.Generator, final_bias: float = 0.0):
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            scale = np.sqrt(1.0 / fan_in) if last else np.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.full(fan_out, final_bias if last else 0.0))

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, grad_out: np.ndarray, acts):
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        g = grad_out
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            x = acts[i]
            grads_w[i] = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            grads_b[i] = g.reshape(-1, g.shape[-1]).sum(axis=0)
            g = g @ self.weights[i].T
        return g, grads_w, grads_b

    @property
    def params(self):
        return list(self.weights) + list(self.biases)


@dataclass
class FieldConfig:
    latent_dim: int = LATENT_DIM
    embed_dim: int = EMBED_DIM
    hidden: int = 64
    n_hidden: int = 2
    resolution: int = DEFAULT_RESOLUTION
    blur_passes: int = DEFAULT_BLUR_PASSES
    sigma_bias_init: float = -10.0  # field starts effectively empty
    background: tuple = (0.0, 0.0, 0.0)

    def color_input_dim(self) -> int:
        return self.latent_dim + encoding_dim(3, Q_FREQS) + encoding_dim(3, D_FREQS) + self.embed_dim


class RadianceField:
    """Vertex-anchored latent codes plus density / color heads and per-frame embeddings.

    `volume` holds the diffused latent grid for whichever frame geometry was
    last anchored via `rebuild_volume`.
    """

    def __init__(self, config: FieldConfig, n_vertices: int, n_frames: int, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.codes = rng.normal(0.0, 0.1, size=(n_vertices, config.latent_dim))
        hidden = [config.hidden] * config.n_hidden
        self.sigma_net = MLP([config.latent_dim] + hidden + [1], rng,
                             final_bias=config.sigma_bias_init)
        self.color_net = MLP([config.color_input_dim()] + hidden + [3], rng)
        self.frame_embeddings = rng.normal(0.0, 0.1, size=(n_frames, config.embed_dim))
        self.volume: LatentVolume | None = None

    @property
    def n_frames(self) -> int:
        return len(self.frame_embeddings)

    def rebuild_volume(self, mesh, bounds=None) -> LatentVolume:
        from .field import LatentCodes, diffuse_latents

        self.volume = diffuse_latents(
            LatentCodes(self.codes), mesh,
            resolution=self.config.resolution,
            blur_passes=self.config.blur_passes,
            bounds=bounds,
        )
        return self.volume

    # --- flat parameter view (order: codes, embeddings, sigma net, color net)

    def parameter_arrays(self):
        return ([self.codes, self.frame_embeddings]
                + self.sigma_net.params + self.color_net.params)

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.parameter_arrays()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        offset = 0
        for a in self.parameter_arrays():
            a[...] = flat[offset: offset + a.size].reshape(a.shape)
            offset += a.size
        if offset != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {offset}")

    def save(self, path) -> None:
        arrays = {"codes": self.codes, "frame_embeddings": self.frame_embeddings}
        for net_name, net in (("sigma", self.sigma_net), ("color", self.color_net)):
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                arrays[f"{net_name}_w{i}"] = w
                arrays[f"{net_name}_b{i}"] = b
        cfg = self.config
        meta = np.array([cfg.latent_dim, cfg.embed_dim, cfg.hidden, cfg.n_hidden,
                         cfg.resolution, cfg.blur_passes], dtype=np.int64)
        np.savez(path, __meta__=meta, __sigma_bias__=np.float64(cfg.sigma_bias_init),
                 __background__=np.asarray(cfg.background, dtype=np.float64), **arrays)

    @classmethod
    def load(cls, path) -> "RadianceField":
        data = np.load(path)
        meta = data["__meta__"]
        cfg = FieldConfig(latent_dim=int(meta[0]), embed_dim=int(meta[1]), hidden=int(meta[2]),
                          n_hidden=int(meta[3]), resolution=int(meta[4]), blur_passes=int(meta[5]),
                          sigma_bias_init=float(data["__sigma_bias__"]),
                          background=tuple(data["__background__"]))
        field = cls(cfg, n_vertices=len(data["codes"]), n_frames=len(data["frame_embeddings"]))
        field.codes[...] = data["codes"]
        field.frame_embeddings[...] = data["frame_embeddings"]
        for net_name, net in (("sigma", field.sigma_net), ("color", field.color_net)):
            for i in range(len(net.weights)):
                net.weights[i][...] = data[f"{net_name}_w{i}"]
                net.biases[i][...] = data[f"{net_name}_b{i}"]
        return field


def eval_sigma(field: RadianceField, q: np.ndarray) -> np.ndarray:
    """Density from the latent code alone (no positional encoding into the density head)."""
    if field.volume is None:
        raise ValueError("field has no latent volume; call rebuild_volume first")
    lat, _, _, _ = trilinear_sample(field.volume.grid, field.volume.bounds, np.asarray(q, dtype=np.float64))
    raw, _ = field.sigma_net.forward(lat)
    return softplus(raw[..., 0])


def eval_color(field: RadianceField, q: np.ndarray, d: np.ndarray, k: int) -> np.ndarray:
    if not 0 <= k < field.n_frames:
        raise IndexError(f"frame {k} out of range [0,{field.n_frames})")
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    lat, _, _, _ = trilinear_sample(field.volume.grid, field.volume.bounds, q)
    emb = np.broadcast_to(field.frame_embeddings[k], q.shape[:-1] + (field.config.embed_dim,))
    x = np.concatenate([lat, positional_encoding(q, Q_FREQS),
                        positional_encoding(d, D_FREQS), emb], axis=-1)
    raw, _ = field.color_net.forward(x)
    return expit(raw)


class FieldDensity:
    """Adapter exposing a frame-anchored radiance field as a density source."""

    def __init__(self, field: RadianceField):
        if field.volume is None:
            raise ValueError("field has no latent volume; call rebuild_volume first")
        self.field = field
        self.bounds = field.volume.bounds

    def density(self, q: np.ndarray) -> np.ndarray:
        return eval_sigma(self.field, q)


# ---------------------------------------------------------------------------
# cameras and rays


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; pose maps camera to world, camera looks along its -z axis."""

    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray  # (4,4) camera-to-world
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        pose = np.asarray(self.pose, dtype=np.float64)
        r = pose[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-8:
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "pose", pose)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_x_deg=40.0, width=64, height=64):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        pose = np.eye(4)
        pose[:3, 0] = right
        pose[:3, 1] = true_up
        pose[:3, 2] = -forward
        pose[:3, 3] = eye
        fx = (width / 2.0) / np.tan(np.deg2rad(fov_x_deg) / 2.0)
        return cls(fx, fx, width / 2.0, height / 2.0, pose, width, height)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be < t_far")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


def camera_rays(camera: Camera):
    """Rays through all pixel centers; returns (origins (H*W,3), unit dirs (H*W,3))."""
    u, v = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    x = (u.ravel() + 0.5 - camera.cx) / camera.fx
    y = -(v.ravel() + 0.5 - camera.cy) / camera.fy
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=1)
    dirs = dirs_cam @ camera.pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:3, 3], dirs.shape).copy()
    return origins, dirs


def intersect_aabb(origins: np.ndarray, dirs: np.ndarray, bounds, min_near=1e-4):
    """Slab test; returns (t_near, t_far, hit mask)."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    tmin = np.maximum(tmin, min_near)
    hit = tmax > tmin
    return tmin, tmax, hit


def sample_depths(t_near, t_far, n_samples: int, jitter):
    """Stratified depths: one sample per bin, plus forward differences.

    jitter is in [0,1) per (ray, sample); pass 0.5 for deterministic midpoints.
    Returns (t (B,n), deltas (B,n)) with the last delta reaching t_far.
    """
    t_near = np.asarray(t_near, dtype=np.float64)[:, None]
    t_far = np.asarray(t_far, dtype=np.float64)[:, None]
    span = t_far - t_near
    offsets = (np.arange(n_samples) + jitter) / n_samples
    t = t_near + offsets * span
    deltas = np.empty_like(t)
    deltas[:, :-1] = t[:, 1:] - t[:, :-1]
    deltas[:, -1] = (t_far - t[:, -1:])[:, 0]
    return t, deltas


def composite(sigma: np.ndarray, colors: np.ndarray, deltas: np.ndarray, background,
              return_aux: bool = False):
    """Discrete volume-rendering quadrature.

    sigma (B,n), colors (B,n,3), deltas (B,n). Returns (rgb (B,3),
    transmittance after the last sample (B,), per-sample weights (B,n)).
    Weights plus final transmittance sum to one per ray. With return_aux the
    per-sample transmittance after each sample is appended (training needs it).
    """
    od = sigma * deltas
    alpha = -np.expm1(-od)  # 1 - exp(-sigma * delta)
    trans_after = np.exp(-np.cumsum(od, axis=1))
    trans_before = np.concatenate([np.ones((len(od), 1)), trans_after[:, :-1]], axis=1)
    weights = trans_before * alpha
    final_t = trans_after[:, -1]
    rgb = np.einsum("bn,bnc->bc", weights, colors) + final_t[:, None] * np.asarray(background)
    if return_aux:
        return rgb, final_t, weights, trans_after
    return rgb, final_t, weights


def render_ray(field: RadianceField, ray: Ray, n_samples: int, k: int, jitter=0.5):
    """Render a single ray; returns (rgb (3,), final transmittance)."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    origins = ray.origin[None]
    dirs = ray.direction[None]
    t, deltas = sample_depths([ray.t_near], [ray.t_far], n_samples, jitter)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    sigma = eval_sigma(field, pts)
    colors = eval_color(field, pts, np.broadcast_to(dirs[:, None, :], pts.shape), k)
    rgb, final_t, _ = composite(sigma, colors, deltas, field.config.background)
    return rgb[0], float(final_t[0])


def _render_chunk(field, origins, dirs, n_samples, k, jitter, background):
    tn, tf, hit = intersect_aabb(origins, dirs, field.volume.bounds)
    rgb = np.tile(np.asarray(background, dtype=np.float64), (len(origins), 1))
    trans = np.ones(len(origins))
    if hit.any():
        t, deltas = sample_depths(tn[hit], tf[hit], n_samples, jitter[hit])
        o = origins[hit]
        d = dirs[hit]
        pts = o[:, None, :] + t[..., None] * d[:, None, :]
        sigma = eval_sigma(field, pts)
        colors = eval_color(field, pts, np.broadcast_to(d[:, None, :], pts.shape), k)
        rgb[hit], trans[hit], _ = composite(sigma, colors, deltas, background)
    return rgb, trans


def render_image(field: RadianceField, camera: Camera, n_samples: int, k: int,
                 seed: int = 0, threads: int = 1, stratified: bool = True) -> np.ndarray:
    """Render a full frame; deterministic per seed and independent of thread count."""
    origins, dirs = camera_rays(camera)
    n_rays = len(origins)
    rng = np.random.Generator(np.random.Philox(key=seed))
    jitter = rng.random((n_rays, n_samples)) if stratified else np.full((n_rays, n_samples), 0.5)
    chunks = range(0, n_rays, RENDER_CHUNK)

    def work(start):
        sl = slice(start, min(start + RENDER_CHUNK, n_rays))
        return start, _render_chunk(field, origins[sl], dirs[sl], n_samples, k,
                                    jitter[sl], field.config.background)

    out = np.empty((n_rays, 3))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for start, (rgb, _) in pool.map(work, chunks):
                out[start: start + len(rgb)] = rgb
    else:
        for start in chunks:
            _, (rgb, _) = work(start)
            out[start: start + len(rgb)] = rgb
    return out.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# image metrics


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse_loss(rendered, target) -> float:
    a, b = _check_pair(rendered, target)
    return float(np.mean((a - b) ** 2))


def l1(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b) -> float:
    """PSNR in dB for [0,1] images; +inf for identical inputs."""
    m = mse_loss(a, b)
    if m == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / m))


def _gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, k1=0.01, k2=0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    win = _gaussian_window()
    c1 = k1 ** 2
    c2 = k2 ** 2
    vals = []
    for ch in range(a.shape[2]):
        x = a[..., ch]
        y = b[..., ch]
        mu_x = convolve2d(x, win, mode="valid")
        mu_y = convolve2d(y, win, mode="valid")
        xx = convolve2d(x * x, win, mode="valid") - mu_x ** 2
        yy = convolve2d(y * y, win, mode="valid") - mu_y ** 2
        xy = convolve2d(x * y, win, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def image_metrics(a, b) -> dict:
    """JSON-friendly {l1, psnr, ssim}; infinite PSNR serialized as the string "inf"."""
    p = psnr(a, b)
    return {"l1": l1(a, b), "psnr": "inf" if np.isinf(p) else p, "ssim": ssim(a, b)}


def save_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
