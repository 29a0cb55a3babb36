"""Flat key = value run configuration.

One documented key set, one type per key, unknown keys are hard errors;
`#` starts a comment.  The parsed object can rebuild every component
config (world, metric, schedule, trainer) so a config file pins a whole run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .diffusion import DEFAULT_SFT_LR, NoiseSchedule, make_schedule
from .errors import ConfigError
from .imgproc import MetricKind
from .mrc import MrcConfig
from .reconstructor import ReconConfig
from .rlft import DEFAULT_KL_STOP, DEFAULT_RLFT_LR, TrainerConfig
from .sceneworld import ViewRig, canonical_rig


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    # world; test prompts are the catalog_size..catalog_size+test_catalog_size-1
    # tail of the generated catalog (pretrained on, never finetuned on)
    catalog_size: int = 8
    test_catalog_size: int = 8
    scene_resolution: int = 16
    view_res: int = 32
    # metric
    mrc_resize_res: int = 64
    mrc_metric: str = "msgd"
    mrc_tau: float = 0.0625
    mrc_bbox_norm: bool = True
    mrc_r_fail: float = -1.0
    recon_lambda: float = 1e-3
    recon_max_iters: int = 200
    recon_tol: float = 1e-8
    # diffusion
    t_train: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    s_infer: int = 20
    eta: float = 1.0
    cfg_scale: float = 5.0
    # model
    hidden_width: int = 256
    embed_dim: int = 16
    freq_count: int = 8
    # sft
    sft_steps: int = 3000
    sft_drop_prob: float = 0.1
    sft_lr: float = DEFAULT_SFT_LR
    # trainer
    alpha: float = 1.0
    beta: float = 0.2
    rlft_lr: float = DEFAULT_RLFT_LR
    batch_size: int = 64
    sample_minibatch: int = 16
    train_minibatch: int = 16
    epochs_max: int = 40
    kl_stop_threshold: float = DEFAULT_KL_STOP
    estimator: str = "sf"
    is_clip: float = 0.2
    is_inner_steps: int = 2
    tracker_window: int = 76
    # stages
    curate_k: int = 8
    curate_samples_per_prompt: int = 4
    eval_samples_per_prompt: int = 4
    distort_prompts: tuple[int, ...] = (0, 6, 7, 13)
    patch_intensities: tuple[float, ...] = (0.0, 4.0, 8.0, 12.0, 16.0)
    azimuth_intensities: tuple[float, ...] = (0.0, 3.6, 7.2, 10.8)
    elevation_intensities: tuple[float, ...] = (0.0, 4.0, 8.0, 12.0)
    scale_batches: tuple[int, ...] = (16, 32)
    scale_datas: tuple[int, ...] = (2, 4)
    scale_epochs: int = 5
    scale_seeds: tuple[int, ...] = (0, 1)

    def rig(self) -> ViewRig:
        return canonical_rig(self.view_res)

    def train_prompts(self) -> list[int]:
        return list(range(self.catalog_size))

    def test_prompts(self) -> list[int]:
        return list(range(self.catalog_size, self.catalog_size + self.test_catalog_size))

    def total_prompts(self) -> int:
        return self.catalog_size + self.test_catalog_size

    def mrc_config(self) -> MrcConfig:
        try:
            metric = MetricKind(self.mrc_metric)
        except ValueError as exc:
            raise ConfigError(f"unknown metric kind {self.mrc_metric!r}") from exc
        return MrcConfig(
            resize_res=self.mrc_resize_res,
            metric=metric,
            tau=self.mrc_tau,
            recon=ReconConfig(lambda_reg=self.recon_lambda,
                              max_iters=self.recon_max_iters, tol=self.recon_tol),
            bbox_norm=self.mrc_bbox_norm,
            grid_resolution=self.scene_resolution,
            r_fail=self.mrc_r_fail,
        )

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.t_train, self.beta_start, self.beta_end,
                             self.s_infer, self.eta)

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(
            alpha=self.alpha, beta=self.beta, lr=self.rlft_lr, batch_size=self.batch_size,
            sample_minibatch=self.sample_minibatch, train_minibatch=self.train_minibatch,
            epochs_max=self.epochs_max, kl_stop_threshold=self.kl_stop_threshold,
            estimator=self.estimator, is_clip=self.is_clip,
            is_inner_steps=self.is_inner_steps, window=self.tracker_window,
            cfg_scale=self.cfg_scale, seed=self.seed, workers=self.workers,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "str":
            return text
        if kind == "tuple[int, ...]":
            return tuple(int(part.strip()) for part in text.split(",") if part.strip())
        if kind == "tuple[float, ...]":
            return tuple(float(part.strip()) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    raise ConfigError(f"unhandled type for key {key}")


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, value))
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
