"""Multi-view consistency scoring and reward finetuning on a voxel toy world.

The package builds a closed loop that can be checked end to end: a
deterministic scene generator and linear renderer, a least-squares grid
reconstructor, a consistency metric over original views vs. re-renders, a
small hand-differentiated denoiser with DDIM-style Gaussian sampling, and a
policy-gradient finetuning loop that pushes the denoiser toward consistent
multi-view outputs.
"""

from .diffusion import (NoiseSchedule, StepRecord, Trajectory, ddim_step_distribution,
                        gaussian_log_prob, guided_noise, make_schedule, q_sample,
                        sample_trajectories, sample_trajectory, sft_train)
from .errors import (BboxOutOfBounds, ConfigError, DimensionMismatch, EmptyCatalog,
                     EmptyDataset, InvalidIntensities, MismatchedBatch,
                     MissingPrerequisite, MrcfitError, NoForeground,
                     NonFiniteGradient, NonPositiveSigma, PoseDegeneracy,
                     SizeTooLarge, TooSmall)
from .imgproc import (Image, MetricKind, SquareBbox, compute_square_bbox,
                      crop_and_resize, image_distance, load_png, load_raw,
                      msgd_distance, pixel_distance, save_png, save_raw)
from .mrc import (DistortionCurve, DistortionKind, MetricComparisonReport, MrcConfig,
                  MrcResult, compute_mrc, curve_smoothness, distortion_experiment,
                  metric_comparison_report, mrc_reward, read_curves_csv,
                  write_curves_csv)
from .nncore import (DenoiserParams, NetDims, OptConfig, OptState, backward,
                     fd_check, forward, freeze, init_params, load_checkpoint,
                     opt_init, opt_step, save_checkpoint)
from .reconstructor import ReconConfig, ReconDiagnostics, reconstruct, rerender
from .rlft import (EpochLog, PerPromptStatTracker, TrainerConfig, TrainerState,
                   curate_prompts, estimate_kl, evaluate_prompts, loss_combined,
                   loss_is, loss_sf, normalize_advantage, rlft_epoch, run_rlft,
                   sample_reward, scaling_run)
from .rng import generator, stream_key
from .runconfig import RunConfig, load_config, parse_config
from .sceneworld import (CameraPose, ViewRig, VoxelScene, canonical_rig,
                         generate_scene, generate_scene_scaled, load_scene,
                         patch_distort, render_multiview, render_view,
                         rotation_distort, save_scene, tile_views, untile_views)

__version__ = "0.1.0"

__all__ = [
    "BboxOutOfBounds", "CameraPose", "ConfigError", "DenoiserParams",
    "DimensionMismatch", "DistortionCurve", "DistortionKind", "EmptyCatalog",
    "EmptyDataset", "EpochLog", "Image", "InvalidIntensities",
    "MetricComparisonReport", "MetricKind", "MismatchedBatch",
    "MissingPrerequisite", "MrcConfig", "MrcResult", "MrcfitError", "NetDims",
    "NoForeground", "NoiseSchedule", "NonFiniteGradient", "NonPositiveSigma",
    "OptConfig", "OptState", "PerPromptStatTracker", "PoseDegeneracy",
    "ReconConfig", "ReconDiagnostics", "RunConfig", "SizeTooLarge",
    "SquareBbox", "StepRecord", "TooSmall", "TrainerConfig", "TrainerState",
    "Trajectory", "ViewRig", "VoxelScene", "backward", "canonical_rig",
    "compute_mrc", "compute_square_bbox", "crop_and_resize", "curate_prompts",
    "curve_smoothness", "ddim_step_distribution", "distortion_experiment",
    "estimate_kl", "evaluate_prompts", "fd_check", "forward", "freeze",
    "gaussian_log_prob", "generate_scene", "generate_scene_scaled", "generator",
    "guided_noise", "image_distance", "init_params", "load_checkpoint",
    "load_config", "load_png", "load_raw", "load_scene", "loss_combined",
    "loss_is", "loss_sf", "make_schedule", "metric_comparison_report",
    "mrc_reward", "msgd_distance", "normalize_advantage", "opt_init", "opt_step",
    "parse_config", "patch_distort", "pixel_distance", "q_sample",
    "read_curves_csv", "reconstruct", "render_multiview", "render_view",
    "rerender", "rlft_epoch", "rotation_distort", "run_rlft", "sample_reward",
    "sample_trajectories", "sample_trajectory", "save_checkpoint", "save_png",
    "save_raw", "save_scene", "scaling_run", "sft_train", "stream_key",
    "tile_views", "untile_views", "write_curves_csv",
]
