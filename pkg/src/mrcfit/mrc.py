"""Multi-view reconstruction-consistency scoring and distortion experiments.

A view set is scored by fitting a density grid to it, re-rendering the grid
at the same poses, and measuring the image distance between each original
view and its re-render inside the original view's square foreground crop.
Inconsistent views cannot all be explained by one grid, so their re-renders
disagree with them and the score rises.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InvalidIntensities, NoForeground
from .imgproc import (DEFAULT_FG_TAU, Image, MetricKind, SquareBbox,
                      compute_square_bbox, crop_and_resize, image_distance)
from .reconstructor import ReconConfig, ReconDiagnostics, reconstruct, rerender
from .sceneworld import (DEFAULT_SCENE_RESOLUTION, CameraPose, PromptId, ViewRig,
                         canonical_rig, generate_scene, patch_distort,
                         render_view, rotation_distort)


@dataclass(frozen=True)
class MrcConfig:
    """Scoring configuration.

    bbox_norm crops both images to the original view's square foreground
    window before measuring; turning it off scores full frames, which lets a
    shrinking object buy background agreement.  grid_resolution is the side
    of the fitted density grid and r_fail the reward handed to view sets
    whose score is undefined.
    """

    resize_res: int = 64
    metric: MetricKind = MetricKind.MSGD
    tau: float = DEFAULT_FG_TAU
    recon: ReconConfig = field(default_factory=ReconConfig)
    bbox_norm: bool = True
    grid_resolution: int = DEFAULT_SCENE_RESOLUTION
    r_fail: float = -1.0

    def __post_init__(self) -> None:
        if self.resize_res < 16:
            raise ValueError(f"resize_res must be >= 16, got {self.resize_res}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.grid_resolution < 4:
            raise ValueError(f"grid_resolution must be >= 4, got {self.grid_resolution}")


@dataclass(frozen=True)
class MrcResult:
    score: float
    per_view: tuple[float, ...]
    bboxes: tuple[SquareBbox, ...] | None
    recon_diagnostics: ReconDiagnostics


def _crop_pairs(views: list[Image] | tuple[Image, ...], poses: tuple[CameraPose, ...],
                cfg: MrcConfig) -> tuple[list[tuple[Image, Image]],
                                         tuple[SquareBbox, ...] | None,
                                         ReconDiagnostics]:
    """Reconstruct, re-render, and produce the per-view (original, re-render) pair.

    With bbox_norm each pair is cropped to the square foreground window of
    the ORIGINAL view (never the re-render) and resampled to resize_res.
    """
    grid, diag = reconstruct(views, tuple(poses), cfg.grid_resolution, cfg.recon)
    rendered = rerender(grid, tuple(poses), views[0].width)
    if not cfg.bbox_norm:
        return [(orig, re) for orig, re in zip(views, rendered)], None, diag
    pairs = []
    bboxes = []
    for orig, re in zip(views, rendered):
        bbox = compute_square_bbox(orig, cfg.tau)
        bboxes.append(bbox)
        pairs.append((crop_and_resize(orig, bbox, cfg.resize_res),
                      crop_and_resize(re, bbox, cfg.resize_res)))
    return pairs, tuple(bboxes), diag


def compute_mrc(views: list[Image] | tuple[Image, ...], poses: tuple[CameraPose, ...],
                cfg: MrcConfig = MrcConfig()) -> MrcResult:
    """Score = mean over views of the configured distance; lower is more consistent."""
    if len(views) != len(poses) or len(views) == 0:
        raise DimensionMismatch(f"{len(views)} views for {len(poses)} poses")
    shapes = {v.data.shape for v in views}
    if len(shapes) != 1:
        raise DimensionMismatch(f"views disagree in shape: {sorted(shapes)}")
    pairs, bboxes, diag = _crop_pairs(views, poses, cfg)
    per_view = tuple(image_distance(orig, re, cfg.metric) for orig, re in pairs)
    return MrcResult(score=float(np.mean(per_view)), per_view=per_view,
                     bboxes=bboxes, recon_diagnostics=diag)


def mrc_reward(views: list[Image] | tuple[Image, ...], poses: tuple[CameraPose, ...],
               cfg: MrcConfig = MrcConfig()) -> float:
    """Negated score, with undefined view sets absorbed into cfg.r_fail.

    Degenerate samples (no foreground anywhere, or a non-finite score) get
    the penalty instead of raising so that a rollout batch always totals.
    """
    try:
        score = compute_mrc(views, poses, cfg).score
    except NoForeground:
        return cfg.r_fail
    if not math.isfinite(score):
        return cfg.r_fail
    return -score


# --------------------------------------------------------------------------
# Distortion experiments

class DistortionKind(Enum):
    PATCH = "patch"
    AZIMUTH = "azimuth"
    ELEVATION = "elevation"


DISTORTED_VIEW_INDEX = 3  # the last rig view is the one that gets corrupted


@dataclass(frozen=True)
class DistortionCurve:
    """Score as a function of distortion intensity for one prompt."""

    kind: DistortionKind
    prompt: PromptId
    intensities: tuple[float, ...]
    scores: tuple[float, ...]
    seed: int


def _check_intensities(intensities: tuple[float, ...] | list[float]) -> tuple[float, ...]:
    vals = tuple(float(v) for v in intensities)
    if len(vals) < 2 or vals[0] != 0.0 or any(b <= a for a, b in zip(vals, vals[1:])):
        raise InvalidIntensities(f"need a strictly increasing grid starting at 0, got {vals}")
    return vals


def _distorted_views(scene, views: tuple[Image, ...], rig: ViewRig,
                     kind: DistortionKind, intensity: float, seed: int) -> list[Image]:
    out = list(views)
    pose = rig.poses[DISTORTED_VIEW_INDEX]
    if kind is DistortionKind.PATCH:
        if intensity != int(intensity):
            raise InvalidIntensities(f"patch sizes must be integral, got {intensity}")
        out[DISTORTED_VIEW_INDEX] = patch_distort(views[DISTORTED_VIEW_INDEX],
                                                  int(intensity), seed)
    elif kind is DistortionKind.AZIMUTH:
        out[DISTORTED_VIEW_INDEX] = rotation_distort(scene, pose, intensity, 0.0, rig.view_res)
    else:
        out[DISTORTED_VIEW_INDEX] = rotation_distort(scene, pose, 0.0, intensity, rig.view_res)
    return out


def distortion_experiment(prompt: PromptId, kind: DistortionKind,
                          intensities: tuple[float, ...] | list[float],
                          cfg: MrcConfig = MrcConfig(), seed: int = 0,
                          rig: ViewRig | None = None,
                          scene_resolution: int = DEFAULT_SCENE_RESOLUTION) -> DistortionCurve:
    """Score a scene's views with view 3 corrupted at each intensity in turn.

    Intensity 0 is required first, so every curve starts at the undistorted
    score of the same scene.
    """
    vals = _check_intensities(intensities)
    rig = rig if rig is not None else canonical_rig()
    scene = generate_scene(prompt, scene_resolution)
    views = tuple(render_view(scene, pose, rig.view_res) for pose in rig.poses)
    scores = []
    for intensity in vals:
        distorted = _distorted_views(scene, views, rig, kind, intensity, seed)
        scores.append(compute_mrc(distorted, rig.poses, cfg).score)
    return DistortionCurve(kind=kind, prompt=prompt, intensities=vals,
                           scores=tuple(scores), seed=seed)


def curve_smoothness(scores: tuple[float, ...] | list[float]) -> float:
    """Mean absolute second difference of the min-max normalized curve.

    0 for straight lines; larger for jagged curves.  Flat curves normalize
    to all zeros and score 0.
    """
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size < 3:
        raise DimensionMismatch(f"smoothness needs >= 3 points, got {arr.size}")
    span = arr.max() - arr.min()
    if span <= 0.0:
        return 0.0
    norm = (arr - arr.min()) / span
    return float(np.mean(np.abs(np.diff(norm, n=2))))


@dataclass(frozen=True)
class MetricComparisonReport:
    """All metric kinds evaluated on one shared set of distorted crops."""

    kind: DistortionKind
    prompts: tuple[PromptId, ...]
    intensities: tuple[float, ...]
    scores: dict  # MetricKind -> {prompt -> tuple of scores}
    smoothness: dict  # MetricKind -> mean curve_smoothness over prompts

    def mean_curve(self, metric: MetricKind) -> tuple[float, ...]:
        per_prompt = [self.scores[metric][p] for p in self.prompts]
        return tuple(float(np.mean(col)) for col in zip(*per_prompt))


def metric_comparison_report(prompts: tuple[PromptId, ...] | list[PromptId],
                             kind: DistortionKind,
                             intensities: tuple[float, ...] | list[float],
                             seed: int = 0, cfg: MrcConfig = MrcConfig(),
                             rig: ViewRig | None = None,
                             scene_resolution: int = DEFAULT_SCENE_RESOLUTION
                             ) -> MetricComparisonReport:
    """Run the distortion pipeline once per (prompt, intensity), score every metric.

    Reconstruction and cropping happen once per cell; the five metric kinds
    are then evaluated on identical crop pairs, which is what makes their
    curves comparable.
    """
    vals = _check_intensities(intensities)
    rig = rig if rig is not None else canonical_rig()
    prompts = tuple(prompts)
    scores: dict[MetricKind, dict[PromptId, tuple[float, ...]]] = {
        m: {} for m in MetricKind}
    for prompt in prompts:
        scene = generate_scene(prompt, scene_resolution)
        views = tuple(render_view(scene, pose, rig.view_res) for pose in rig.poses)
        per_metric: dict[MetricKind, list[float]] = {m: [] for m in MetricKind}
        for intensity in vals:
            distorted = _distorted_views(scene, views, rig, kind, intensity, seed)
            pairs, _, _ = _crop_pairs(distorted, rig.poses, cfg)
            for metric in MetricKind:
                per_metric[metric].append(
                    float(np.mean([image_distance(o, r, metric) for o, r in pairs])))
        for metric in MetricKind:
            scores[metric][prompt] = tuple(per_metric[metric])
    smoothness = {
        metric: float(np.mean([curve_smoothness(scores[metric][p]) for p in prompts]))
        for metric in MetricKind}
    return MetricComparisonReport(kind=kind, prompts=prompts, intensities=vals,
                                  scores=scores, smoothness=smoothness)


# --------------------------------------------------------------------------
# CSV interchange (header: kind,intensity,score)

CURVE_CSV_HEADER = ("kind", "intensity", "score")


def write_curves_csv(path: str | Path, rows: list[tuple[str, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_CSV_HEADER)
        for kind, intensity, score in rows:
            writer.writerow([kind, repr(float(intensity)), repr(float(score))])


def read_curves_csv(path: str | Path) -> list[tuple[str, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CURVE_CSV_HEADER:
            raise DimensionMismatch(f"bad curve CSV header {header}")
        return [(kind, float(intensity), float(score)) for kind, intensity, score in reader]


def curve_rows(curve: DistortionCurve) -> list[tuple[str, float, float]]:
    return [(curve.kind.value, i, s) for i, s in zip(curve.intensities, curve.scores)]


def report_rows(report: MetricComparisonReport) -> list[tuple[str, float, float]]:
    """Average over prompts, one row per (metric kind, intensity)."""
    rows = []
    for metric in MetricKind:
        for intensity, score in zip(report.intensities, report.mean_curve(metric)):
            rows.append((metric.value, intensity, score))
    return rows
