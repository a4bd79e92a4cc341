"""Geometry-guided head avatar pipeline: vertex-anchored latent radiance
fields, 2.5D surface extraction, SDF-based mesh refinement with
displacement-only Laplacian smoothing, and two-phase training."""

from .mesh import (TriMesh, MeshError, MeshParseError, TriangleIndex,
                   cotangent_laplacian, load_mesh, mesh_l2_distance,
                   save_mesh, vertex_normals)
from .morphable import (BlendshapeModel, HeadParams, evaluate_model,
                        generate_synthetic_model, icosphere, load_model, save_model)
from .field import (AnalyticDensity, GridDensity, LatentCodes, LatentVolume,
                    analytic_density, diffuse_latents, grid_density,
                    load_voxel_grid, query_latent, save_voxel_grid)
from .render import (Camera, FieldConfig, RadianceField, Ray, eval_color,
                     eval_sigma, image_metrics, l1, mse_loss,
                     positional_encoding, psnr, render_image, render_ray, ssim)
from .refine import (HeightField, PerturbConfig, SdfSurface, build_sdf,
                     extract_height_field, frontal_confidence, perturb_vertices)
from .smooth import (SmoothConfig, SolverError, apply_refinement,
                     smooth_displacements, solve_spd)
from .train import Frame, TrainConfig, gradient_check, run_pipeline, train_phase

__version__ = "0.1.0"
