"""Displacement-only implicit Laplacian smoothing via conjugate gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import TriMesh


class SolverError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"conjugate gradient failed to converge: relative residual {residual:.3e} "
            f"after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SmoothConfig:
    lam: float = 0.05        # Laplacian regularization weight
    iterations: int = 10     # repeated implicit smoothing passes
    cg_tol: float = 1e-8     # relative residual per solve
    cg_max_iter: int | None = None  # defaults to 10 * N

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def solve_spd(a: sp.spmatrix, b: np.ndarray, tol: float = 1e-8,
              max_iter: int | None = None) -> np.ndarray:
    """Conjugate gradient for a symmetric positive definite system."""
    b = np.asarray(b, dtype=np.float64)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros_like(b)
    if max_iter is None:
        max_iter = 10 * b.size
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(max_iter):
        ap = a @ p
        alpha = rr / (p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = r @ r
        if np.sqrt(rr_new) <= tol * b_norm:
            return x
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise SolverError(float(np.sqrt(rr) / b_norm), max_iter)


def smooth_displacements(laplacian: sp.spmatrix, displacements: np.ndarray,
                         cfg: SmoothConfig) -> np.ndarray:
    """Implicit smoothing of a displacement field: solve (I + lam*L) X = D per
    coordinate, repeated cfg.iterations times feeding X back as the right-hand
    side. Operates on displacements, never positions, so unmoved vertices stay
    bitwise fixed.
    """
    d = np.asarray(displacements, dtype=np.float64)
    n = laplacian.shape[0]
    if d.shape[0] != n:
        raise ValueError(f"displacements have {d.shape[0]} rows, Laplacian is {n}x{n}")
    if cfg.lam == 0.0:
        return d.copy()
    a = (sp.identity(n, format="csr") + cfg.lam * laplacian).tocsr()
    x = d.copy()
    for _ in range(cfg.iterations):
        x = np.stack(
            [solve_spd(a, x[:, c], tol=cfg.cg_tol, max_iter=cfg.cg_max_iter) for c in range(x.shape[1])],
            axis=1,
        )
    return x


def apply_refinement(mesh: TriMesh, smoothed: np.ndarray) -> TriMesh:
    """Refined mesh: initial vertices plus smoothed displacements, same connectivity."""
    smoothed = np.asarray(smoothed, dtype=np.float64)
    if smoothed.shape != mesh.vertices.shape:
        raise ValueError(f"displacement shape {smoothed.shape} != vertices {mesh.vertices.shape}")
    return mesh.with_vertices(mesh.vertices + smoothed)
