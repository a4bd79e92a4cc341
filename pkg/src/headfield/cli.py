"""Command-line entry point: render, heightmap, refine, train, pipeline, metrics.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every run writes a
resolved-config.json with the effective option values into the output
directory. Options may come from a JSON file via --config; explicit flags win.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import field as field_mod
from .field import GridDensity, load_voxel_grid, save_voxel_grid, dilated_bounds
from .mesh import cotangent_laplacian, load_mesh, save_mesh
from .refine import PerturbConfig, build_sdf, cross_section, extract_height_field, perturb_vertices
from .render import Camera, RadianceField, FieldDensity, image_metrics, load_png, render_image, save_png
from .scene import build_scene, resolve_scene_config, spiral_cameras
from .smooth import SmoothConfig, apply_refinement, smooth_displacements
from .train import Frame, TrainConfig, run_pipeline, train_phase


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_resolved_config(out_dir: Path, values: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    clean = {k: (str(v) if isinstance(v, Path) else v) for k, v in values.items()}
    with open(out_dir / "resolved-config.json", "w") as fh:
        json.dump(clean, fh, indent=2, sort_keys=True)


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- --config file <- explicit flags (None means 'not given')."""
    effective = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown keys in --config: {sorted(unknown)}")
        effective.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            effective[key] = value
    return effective


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="global RNG seed")
    p.add_argument("--threads", type=int, default=None, help="worker pool cap")
    p.add_argument("--out-dir", dest="out_dir", default=None, help="output directory")
    p.add_argument("--config", default=None, help="JSON file of option values; flags win")


def _density_from_path(path: str, anchor_mesh=None):
    path = Path(path)
    if path.suffix == ".vox":
        values, bounds = load_voxel_grid(path)
        return GridDensity(values[..., 0], bounds)
    if path.suffix == ".npz":
        if anchor_mesh is None:
            raise UsageError("a field (.npz) density needs a mesh to anchor its latent codes")
        field = RadianceField.load(path)
        field.rebuild_volume(anchor_mesh)
        return FieldDensity(field)
    raise UsageError(f"density must be a .vox grid or .npz field, got {path.suffix!r}")


def _cmd_metrics(args) -> int:
    cfg = _merge_config(args, {"seed": 0, "threads": 1, "out_dir": "headfield_out"})
    out_dir = Path(cfg["out_dir"])
    a = load_png(args.image_a)
    b = load_png(args.image_b)
    metrics = image_metrics(a, b)
    _write_resolved_config(out_dir, {**cfg, "image_a": args.image_a, "image_b": args.image_b})
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _cmd_render(args) -> int:
    defaults = {"seed": 0, "threads": 1, "out_dir": "headfield_out",
                "n_samples": 64, "frame": 0, "width": 64, "height": 64,
                "fov_x_deg": 34.0, "cam_distance": 0.35, "cam_theta_deg": 0.0,
                "cam_phi_deg": 0.0}
    cfg = _merge_config(args, defaults)
    out_dir = Path(cfg["out_dir"])
    field = RadianceField.load(args.field)
    mesh = load_mesh(args.mesh)
    field.rebuild_volume(mesh)
    theta = np.deg2rad(cfg["cam_theta_deg"])
    phi = np.deg2rad(cfg["cam_phi_deg"])
    eye = cfg["cam_distance"] * np.array(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    camera = Camera.look_at(eye, (0, 0, 0), fov_x_deg=cfg["fov_x_deg"],
                            width=cfg["width"], height=cfg["height"])
    img = render_image(field, camera, cfg["n_samples"], cfg["frame"],
                       seed=cfg["seed"], threads=cfg["threads"])
    _write_resolved_config(out_dir, {**cfg, "field": args.field, "mesh": args.mesh,
                                     "out": args.out})
    save_png(args.out, img)
    return 0


def _cmd_heightmap(args) -> int:
    defaults = {"seed": 0, "threads": 1, "out_dir": "headfield_out",
                "resolution": 256, "tau": 0.5, "steps": 256, "slab_x": 0.0}
    cfg = _merge_config(args, defaults)
    out_dir = Path(cfg["out_dir"])
    anchor = load_mesh(args.mesh) if args.mesh else None
    density = _density_from_path(args.density, anchor)
    hf = extract_height_field(density, (cfg["resolution"], cfg["resolution"]),
                              tau=cfg["tau"], n_steps=cfg["steps"])
    _write_resolved_config(out_dir, {**cfg, "density": args.density, "mesh": args.mesh})
    depths = np.where(np.isfinite(hf.depths), hf.depths, 0.0)
    save_voxel_grid(out_dir / "heightfield.vox", depths[..., None],
                    (np.array([hf.x_coords[0], hf.y_coords[0], 0.0]),
                     np.array([hf.x_coords[-1], hf.y_coords[-1], 0.0])))
    if hf.n_valid():
        save_mesh(hf.to_mesh(), out_dir / "heightfield_surface.obj")
        if anchor is not None:
            rows = cross_section(anchor, anchor.vertices, hf, x_slab=cfg["slab_x"])
        else:
            i = int(np.argmin(np.abs(hf.x_coords - cfg["slab_x"])))
            rows = [("surface", float(y), float(z))
                    for y, z in zip(hf.y_coords, hf.depths[i]) if np.isfinite(z)]
        with open(out_dir / "cross_section.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "y", "z"])
            writer.writerows(rows)
    return 0


def _cmd_refine(args) -> int:
    defaults = {"seed": 0, "threads": 1, "out_dir": "headfield_out",
                "lam": 0.05, "smooth_iters": 10, "cg_tol": 1e-8,
                "epsilon": None, "ray_extent": 0.03, "m_samples": 32,
                "hf_resolution": 256, "tau": 0.5, "hf_steps": 256}
    cfg = _merge_config(args, defaults)
    out_dir = Path(cfg["out_dir"])
    mesh = load_mesh(args.mesh)
    out_path = Path(args.output) if args.output else out_dir / "refined.obj"
    _write_resolved_config(out_dir, {**cfg, "mesh": args.mesh, "density": args.density,
                                     "no_perturb": args.no_perturb, "no_smooth": args.no_smooth,
                                     "output": str(out_path)})
    if args.no_perturb:
        displacements = np.zeros_like(mesh.vertices)
    else:
        if args.density is None:
            raise UsageError("refine needs a density unless --no-perturb is given")
        density = _density_from_path(args.density, mesh)
        hf = extract_height_field(density, (cfg["hf_resolution"], cfg["hf_resolution"]),
                                  tau=cfg["tau"], n_steps=cfg["hf_steps"])
        epsilon = cfg["epsilon"]
        if epsilon is None:
            lo, hi = mesh.aabb()
            epsilon = 0.01 * float(np.linalg.norm(hi - lo))
        sdf = build_sdf(hf)
        displacements = perturb_vertices(
            mesh, sdf, PerturbConfig(cfg["m_samples"], cfg["ray_extent"], epsilon))
    if args.no_smooth:
        smoothed = displacements
    else:
        laplacian = cotangent_laplacian(mesh)
        smoothed = smooth_displacements(
            laplacian, displacements,
            SmoothConfig(cfg["lam"], cfg["smooth_iters"], cfg["cg_tol"]))
    save_mesh(apply_refinement(mesh, smoothed), out_path)
    return 0


def _cmd_train(args) -> int:
    defaults = {"seed": 0, "threads": 1, "out_dir": "headfield_out", "steps": None}
    cfg = _merge_config(args, defaults)
    out_dir = Path(cfg["out_dir"])
    scene_cfg = resolve_scene_config(args.scene)
    if cfg["seed"] is not None:
        scene_cfg["seed"] = cfg["seed"]
    scene = build_scene(scene_cfg)
    _write_resolved_config(out_dir, {**cfg, "scene": args.scene})
    from .render import FieldConfig

    fc = scene_cfg["field"]
    field_cfg = FieldConfig(latent_dim=fc["latent_dim"], embed_dim=fc["embed_dim"],
                            hidden=fc["hidden"], resolution=fc["resolution"],
                            blur_passes=fc["blur_passes"],
                            background=tuple(scene_cfg["render"]["background"]))
    n_train = len(scene.train_cameras)
    field = RadianceField(field_cfg, scene.template.n_vertices, n_train + 1,
                          seed=scene_cfg["seed"])
    frames = [Frame(img, cam, None, i)
              for i, (img, cam) in enumerate(zip(scene.train_images, scene.train_cameras))]
    tc = scene_cfg["train"]
    steps = cfg["steps"] if cfg["steps"] is not None else tc["steps_phase1"]
    train_cfg = TrainConfig(lr=tc["lr"], adam_beta1=tc["adam_beta1"],
                            adam_beta2=tc["adam_beta2"], adam_eps=tc["adam_eps"],
                            rays_per_step=tc["rays_per_step"], steps=steps,
                            n_samples=scene_cfg["render"]["n_samples"], seed=tc["seed"])
    field, history = train_phase(field, [scene.template] * n_train, frames, train_cfg)
    field.save(out_dir / "field.npz")
    save_mesh(scene.template, out_dir / "template.obj")
    with open(out_dir / "loss_history.json", "w") as fh:
        json.dump(history, fh)
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _merge_config(args, {"seed": None, "threads": 1, "out_dir": "headfield_out"})
    scene_cfg = resolve_scene_config(args.scene)
    if cfg["seed"] is not None:
        scene_cfg["seed"] = cfg["seed"]
    report = run_pipeline(scene_cfg, cfg["out_dir"], threads=cfg["threads"])
    print(json.dumps({"phase1_psnr": report["phase1"]["test"]["mean"]["psnr"],
                      "phase2_psnr": report["phase2"]["test"]["mean"]["psnr"],
                      "ablation": report["ablation"]}, sort_keys=True))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="headfield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("metrics", help="compare two PNGs: L1 / PSNR / SSIM")
    p.add_argument("image_a")
    p.add_argument("image_b")
    _add_common(p)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("render", help="render a trained field from a camera")
    p.add_argument("--field", required=True, help="trained field .npz")
    p.add_argument("--mesh", required=True, help="mesh anchoring the latent codes (OBJ/PLY)")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--fov-x-deg", dest="fov_x_deg", type=float, default=None)
    p.add_argument("--cam-distance", dest="cam_distance", type=float, default=None)
    p.add_argument("--cam-theta-deg", dest="cam_theta_deg", type=float, default=None)
    p.add_argument("--cam-phi-deg", dest="cam_phi_deg", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("heightmap", help="extract a 2.5D height field from a density")
    p.add_argument("density", help=".vox grid or trained field .npz")
    p.add_argument("--mesh", default=None, help="anchor mesh (required for .npz densities)")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--slab-x", dest="slab_x", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_heightmap)

    p = sub.add_parser("refine", help="perturb + smooth a mesh against a density")
    p.add_argument("mesh", help="input OBJ/PLY")
    p.add_argument("density", nargs="?", default=None, help=".vox grid or field .npz")
    p.add_argument("-o", "--output", default=None, help="output OBJ")
    p.add_argument("--no-perturb", action="store_true")
    p.add_argument("--no-smooth", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--smooth-iters", dest="smooth_iters", type=int, default=None)
    p.add_argument("--cg-tol", dest="cg_tol", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--ray-extent", dest="ray_extent", type=float, default=None)
    p.add_argument("--m-samples", dest="m_samples", type=int, default=None)
    p.add_argument("--hf-resolution", dest="hf_resolution", type=int, default=None)
    p.add_argument("--hf-steps", dest="hf_steps", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("train", help="phase-one training on a scene config")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("pipeline", help="full two-phase run on a scene config")
    p.add_argument("scene", help="scene JSON")
    _add_common(p)
    p.set_defaults(func=_cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
