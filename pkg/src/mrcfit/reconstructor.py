"""Voxel-grid recovery from posed views by regularized linear least squares.

The renderer is affine in density (pixel = 1 - A @ grid), so fitting a grid
to views is the Tikhonov problem

    minimize  ||A g - b||^2 + lambda * ||g||^2,   b = stacked (1 - view),

solved by conjugate gradient on the normal equations (A^T A + lambda I) g =
A^T b.  A and its exact adjoint come from the renderer's sparse operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, PoseDegeneracy
from .imgproc import Image
from .sceneworld import CameraPose, VoxelScene, render_operator, render_view


@dataclass(frozen=True)
class ReconConfig:
    """Solver knobs; defaults are the package-wide reconstruction settings."""

    lambda_reg: float = 1e-3
    max_iters: int = 200
    tol: float = 1e-8

    def __post_init__(self) -> None:
        if self.lambda_reg <= 0.0:
            raise ValueError(f"lambda_reg must be > 0, got {self.lambda_reg}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol <= 0.0:
            raise ValueError(f"tol must be > 0, got {self.tol}")


@dataclass(frozen=True)
class ReconDiagnostics:
    """Solver outcome; non-convergence is reported here, never raised."""

    iterations: int
    converged: bool
    normal_residual: float          # relative normal-equation residual at exit
    data_objective: float           # ||A g - b||^2 at exit
    objective_history: tuple[float, ...] = ()  # Tikhonov objective per iteration, if recorded


def _validate_inputs(views: list[Image] | tuple[Image, ...],
                     poses: tuple[CameraPose, ...]) -> int:
    if len(views) != len(poses):
        raise DimensionMismatch(f"{len(views)} views for {len(poses)} poses")
    if len(views) == 0:
        raise DimensionMismatch("no views given")
    shapes = {v.data.shape for v in views}
    if len(shapes) != 1:
        raise DimensionMismatch(f"views disagree in shape: {sorted(shapes)}")
    (h, w), = shapes
    if h != w:
        raise DimensionMismatch(f"views must be square, got {w}x{h}")
    if len(set(poses)) != len(poses):
        raise PoseDegeneracy("duplicate camera poses make the fit underdetermined")
    return w


def reconstruct(views: list[Image] | tuple[Image, ...], poses: tuple[CameraPose, ...],
                resolution: int, cfg: ReconConfig = ReconConfig(),
                record_objective: bool = False) -> tuple[VoxelScene, ReconDiagnostics]:
    """Fit a density grid to the views; returns the clamped grid plus diagnostics.

    CG stops when the relative normal-equation residual falls below cfg.tol
    or after cfg.max_iters iterations, whichever is first.  With
    record_objective the full Tikhonov objective is evaluated every iteration
    (one extra operator application) and returned in the diagnostics.
    """
    view_res = _validate_inputs(views, poses)
    mat = render_operator(tuple(poses), view_res, resolution)
    mat_t = mat.T.tocsr()
    b = np.concatenate([(1.0 - v.data).ravel() for v in views])
    lam = cfg.lambda_reg

    def normal_apply(x: np.ndarray) -> np.ndarray:
        return mat_t @ (mat @ x) + lam * x

    def objective(x: np.ndarray) -> float:
        r = mat @ x - b
        return float(r @ r + lam * (x @ x))

    rhs = mat_t @ b
    x = np.zeros(resolution ** 3)
    r = rhs.copy()
    rs = float(r @ r)
    rs0 = rs
    history: list[float] = []
    iterations = 0
    if rs0 > 0.0:
        p = r.copy()
        threshold = (cfg.tol ** 2) * rs0
        for iterations in range(1, cfg.max_iters + 1):
            ap = normal_apply(p)
            alpha = rs / float(p @ ap)
            x = x + alpha * p
            r = r - alpha * ap
            rs_new = float(r @ r)
            if record_objective:
                history.append(objective(x))
            if rs_new <= threshold:
                rs = rs_new
                break
            p = r + (rs_new / rs) * p
            rs = rs_new

    converged = rs <= (cfg.tol ** 2) * rs0 if rs0 > 0.0 else True
    diag = ReconDiagnostics(
        iterations=iterations,
        converged=converged,
        normal_residual=float(np.sqrt(rs / rs0)) if rs0 > 0.0 else 0.0,
        data_objective=float(np.sum((mat @ x - b) ** 2)),
        objective_history=tuple(history),
    )
    grid = np.clip(x, 0.0, 1.0).reshape(resolution, resolution, resolution)
    return VoxelScene(grid), diag


def rerender(grid: VoxelScene, poses: tuple[CameraPose, ...], view_res: int) -> tuple[Image, ...]:
    """Render the fitted grid at the given poses (same renderer as the world)."""
    return tuple(render_view(grid, pose, view_res) for pose in poses)
