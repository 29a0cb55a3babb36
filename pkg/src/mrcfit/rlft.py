"""Reward finetuning of the denoiser on the consistency reward.

The denoising chain is treated as a Gaussian-policy MDP.  Per-prompt
windowed statistics normalize both the reward and the KL regularizer into
advantages; the policy gradient comes either from the score-function
estimator (one update per batch) or the clipped importance-sampling
surrogate (several inner updates per batch).  Everything is deterministic
given the config seed.
"""

from __future__ import annotations

import csv
import json
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, EmptyCatalog, MismatchedBatch
from .diffusion import (DEFAULT_CFG_SCALE, NoiseSchedule, Trajectory,
                        gaussian_log_prob, sample_trajectories)
from .imgproc import Image
from .mrc import MrcConfig, mrc_reward
from .nncore import (DenoiserParams, OptConfig, OptState, backward, forward,
                     grads_axpy, grads_norm, grads_zero, opt_init, opt_step)
from .rng import generator, stream_key
from .sceneworld import ViewRig, untile_views

# Calibrated on the default world: a 40-epoch run at the default step size
# ends near mean KL 55, while runs whose step size inflates the sampler's
# output variance blow past 200 within a few epochs, so this threshold acts
# purely as a runaway guard; see TrainerConfig.kl_stop_threshold.
DEFAULT_KL_STOP = 200.0

# Finetuning step size.  Larger values (3e-3 .. 3e-2) were swept and only
# degrade the sampler: the policy-gradient noise random-walks the weights,
# which inflates the output variance long before any reward slope is found.
DEFAULT_RLFT_LR = 3e-4

SIGMA_FLOOR = 1e-6  # floor on the normalizing std inside advantage normalization


@dataclass(frozen=True)
class TrainerConfig:
    """Finetuning knobs; alpha scales the reward term, beta the KL term."""

    alpha: float = 1.0
    beta: float = 0.2
    lr: float = DEFAULT_RLFT_LR
    batch_size: int = 64
    sample_minibatch: int = 16
    train_minibatch: int = 16
    epochs_max: int = 40
    kl_stop_threshold: float = DEFAULT_KL_STOP
    estimator: str = "sf"  # "sf" or "is"
    is_clip: float = 0.2
    is_inner_steps: int = 2
    window: int = 76
    min_count: int | None = None  # None derives 2 * batch-per-prompt at run time
    adv_clip: float = 5.0
    cfg_scale: float = DEFAULT_CFG_SCALE
    seed: int = 0
    workers: int = 1
    kl_probe_prompts: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.estimator not in ("sf", "is"):
            raise ValueError(f"estimator must be 'sf' or 'is', got {self.estimator!r}")
        if self.batch_size < 1 or self.epochs_max < 0:
            raise ValueError("batch_size must be >= 1 and epochs_max >= 0")
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("alpha and beta must be >= 0")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.is_inner_steps < 1 or self.is_clip <= 0.0:
            raise ValueError("is_inner_steps must be >= 1 and is_clip > 0")


class PerPromptStatTracker:
    """Windowed per-prompt mean/std buffers for advantage normalization.

    update() pushes the batch values first, then normalizes each value with
    its prompt's buffer statistics (population std, floored at 1e-6).
    Prompts whose buffer is still shorter than min_count fall back to the
    statistics of the current batch.  Outputs are clipped to +-adv_clip.
    """

    def __init__(self, window: int = 76, min_count: int = 2, adv_clip: float = 5.0):
        if window < 1 or min_count < 0:
            raise ValueError("window must be >= 1 and min_count >= 0")
        self.window = window
        self.min_count = min_count
        self.adv_clip = adv_clip
        self._buffers: dict[int, deque] = {}

    def update(self, prompts, values) -> np.ndarray:
        vals = np.asarray(values, dtype=np.float64)
        if len(prompts) != vals.shape[0]:
            raise MismatchedBatch(f"{len(prompts)} prompts for {vals.shape[0]} values")
        batch_mean = float(vals.mean())
        batch_std = float(vals.std())
        for prompt, value in zip(prompts, vals):
            self._buffers.setdefault(int(prompt), deque(maxlen=self.window)).append(float(value))
        adv = np.empty_like(vals)
        for i, (prompt, value) in enumerate(zip(prompts, vals)):
            buf = self._buffers[int(prompt)]
            if len(buf) < self.min_count:
                mu, sd = batch_mean, batch_std
            else:
                arr = np.asarray(buf)
                mu, sd = float(arr.mean()), float(arr.std())
            adv[i] = (value - mu) / max(sd, SIGMA_FLOOR)
        return np.clip(adv, -self.adv_clip, self.adv_clip)

    def buffer(self, prompt: int) -> tuple[float, ...]:
        return tuple(self._buffers.get(int(prompt), ()))


def normalize_advantage(values, buffer_values, adv_clip: float = 5.0) -> np.ndarray:
    """Normalize `values` against an already-updated buffer (population std)."""
    buf = np.asarray(buffer_values, dtype=np.float64)
    if buf.size == 0:
        raise DimensionMismatch("empty statistics buffer")
    mu = float(buf.mean())
    sd = max(float(buf.std()), SIGMA_FLOOR)
    adv = (np.asarray(values, dtype=np.float64) - mu) / sd
    return np.clip(adv, -adv_clip, adv_clip)


def estimate_kl(traj: Trajectory) -> float:
    """Mean over steps of (logp_current - logp_base); 0 when sampled at the base."""
    return float(np.mean([s.logp_current - s.logp_base for s in traj.steps]))


# --------------------------------------------------------------------------
# Policy-gradient losses (manual gradients; each returns (loss, grads))

def _step_policy_pass(params: DenoiserParams, trajs: list[Trajectory], step: int,
                      schedule: NoiseSchedule, cfg_scale: float):
    """Recompute step `step` means and log-probs under `params` for a chunk."""
    x = np.stack([traj.steps[step].x_t for traj in trajs])
    actions = np.stack([traj.steps[step].action for traj in trajs])
    t = int(schedule.taus[step])
    sigma = float(schedule.sigmas[step])
    rows = np.array([params.dims.num_prompts if traj.prompt is None else int(traj.prompt)
                     for traj in trajs])
    stacked = np.vstack([x, x])
    cs = np.concatenate([rows, np.full(len(rows), -1, dtype=np.int64)])
    eps = forward(params, stacked, t, cs)
    eps_hat = eps[len(rows):] + cfg_scale * (eps[:len(rows)] - eps[len(rows):])
    means = schedule.k_state[step] * x + schedule.k_noise[step] * eps_hat
    logps = np.array([gaussian_log_prob(actions[i], means[i], sigma)
                      for i in range(len(trajs))])
    return x, actions, t, sigma, rows, means, logps


def _accumulate_step_grads(params, acc, x, t, rows, upstream, cfg_scale) -> None:
    # d eps_hat / d eps_cond = cfg_scale, / d eps_uncond = 1 - cfg_scale.
    stacked = np.vstack([x, x])
    cs = np.concatenate([rows, np.full(len(rows), -1, dtype=np.int64)])
    up = np.vstack([cfg_scale * upstream, (1.0 - cfg_scale) * upstream])
    grads_axpy(acc, backward(params, stacked, t, cs, up))


def loss_sf(params: DenoiserParams, trajs: list[Trajectory], advantages,
            schedule: NoiseSchedule, cfg_scale: float = DEFAULT_CFG_SCALE,
            minibatch: int = 16) -> tuple[float, dict]:
    """Score-function objective: -(1/N) sum_i A_i * sum_t log pi(a_t | s_t).

    Log-probs are recomputed under the current parameters; the returned
    gradient is the exact gradient of the returned scalar.
    """
    adv = np.asarray(advantages, dtype=np.float64)
    if len(trajs) != adv.shape[0]:
        raise MismatchedBatch(f"{len(trajs)} trajectories for {adv.shape[0]} advantages")
    n = len(trajs)
    loss = 0.0
    grads = grads_zero(params)
    for lo in range(0, n, minibatch):
        chunk = trajs[lo:lo + minibatch]
        coeff = adv[lo:lo + minibatch]
        for step in range(schedule.s_infer):
            x, actions, t, sigma, rows, means, logps = _step_policy_pass(
                params, chunk, step, schedule, cfg_scale)
            loss += float(-(coeff * logps).sum() / n)
            # d(-A * logp)/d mean = -A * (a - mean)/sigma^2; chain to eps_hat.
            d_mean = (-coeff[:, None] / n) * (actions - means) / (sigma * sigma)
            upstream = schedule.k_noise[step] * d_mean
            _accumulate_step_grads(params, grads, x, t, rows, upstream, cfg_scale)
    return loss, grads


def loss_is(params: DenoiserParams, trajs: list[Trajectory], advantages,
            clip: float = 0.2, schedule: NoiseSchedule | None = None,
            cfg_scale: float = DEFAULT_CFG_SCALE,
            minibatch: int = 16) -> tuple[float, dict]:
    """Clipped importance-sampling surrogate over per-step ratios.

    ratio_t = exp(logp_now - logp_sampled); the per-step term is
    min(ratio * A, clip(ratio, 1-c, 1+c) * A) and gradient flows only where
    the unclipped branch attains the min (ties keep the unclipped branch).
    At parameters equal to the sampling parameters every ratio is exactly 1
    and the gradient coincides with the score-function gradient.
    """
    if schedule is None:
        raise ValueError("loss_is needs the sampling schedule")
    adv = np.asarray(advantages, dtype=np.float64)
    if len(trajs) != adv.shape[0]:
        raise MismatchedBatch(f"{len(trajs)} trajectories for {adv.shape[0]} advantages")
    n = len(trajs)
    loss = 0.0
    grads = grads_zero(params)
    for lo in range(0, n, minibatch):
        chunk = trajs[lo:lo + minibatch]
        coeff = adv[lo:lo + minibatch]
        for step in range(schedule.s_infer):
            x, actions, t, sigma, rows, means, logps = _step_policy_pass(
                params, chunk, step, schedule, cfg_scale)
            old_logps = np.array([traj.steps[step].logp_current for traj in chunk])
            ratios = np.exp(logps - old_logps)
            clipped = np.clip(ratios, 1.0 - clip, 1.0 + clip)
            unclipped_term = ratios * coeff
            clipped_term = clipped * coeff
            loss += float(-np.minimum(unclipped_term, clipped_term).sum() / n)
            active = unclipped_term <= clipped_term
            scale = np.where(active, ratios * coeff, 0.0)
            d_mean = (-scale[:, None] / n) * (actions - means) / (sigma * sigma)
            upstream = schedule.k_noise[step] * d_mean
            _accumulate_step_grads(params, grads, x, t, rows, upstream, cfg_scale)
    return loss, grads


def loss_combined(params: DenoiserParams, trajs: list[Trajectory], adv_reward,
                  adv_kl, alpha: float, beta: float, estimator: str,
                  schedule: NoiseSchedule, cfg_scale: float = DEFAULT_CFG_SCALE,
                  clip: float = 0.2, minibatch: int = 16) -> tuple[float, dict]:
    """Reward-plus-KL objective via the effective advantage alpha*A_r - beta*A_KL."""
    effective = (alpha * np.asarray(adv_reward, dtype=np.float64)
                 - beta * np.asarray(adv_kl, dtype=np.float64))
    if estimator == "sf":
        return loss_sf(params, trajs, effective, schedule, cfg_scale, minibatch)
    return loss_is(params, trajs, effective, clip, schedule, cfg_scale, minibatch)


# --------------------------------------------------------------------------
# Rewards

def tile_to_views(x0: np.ndarray, rig: ViewRig) -> tuple[Image, ...]:
    """Clamp a flat sample into [0, 1] and split the 2x2 tile into rig views."""
    side = 2 * rig.view_res
    if x0.size != side * side:
        raise DimensionMismatch(f"sample has {x0.size} values, rig tile needs {side * side}")
    tile = Image(np.clip(x0.reshape(side, side), 0.0, 1.0))
    return untile_views(tile)


def sample_reward(x0: np.ndarray, rig: ViewRig, mrc_cfg: MrcConfig) -> float:
    return mrc_reward(tile_to_views(x0, rig), rig.poses, mrc_cfg)


def _batch_rewards(samples: list[np.ndarray], rig: ViewRig, mrc_cfg: MrcConfig,
                   workers: int) -> list[float]:
    if workers <= 1:
        return [sample_reward(x0, rig, mrc_cfg) for x0 in samples]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(sample_reward, samples,
                             [rig] * len(samples), [mrc_cfg] * len(samples),
                             chunksize=max(1, len(samples) // (4 * workers))))


# --------------------------------------------------------------------------
# Epoch loop

@dataclass(frozen=True)
class EpochLog:
    """Per-epoch summary; wall_time is informational and never serialized."""

    epoch: int
    reward_mean: float
    reward_std: float
    kl_mean: float
    grad_norm: float
    wall_time: float
    per_prompt_reward: dict = field(default_factory=dict)
    kl_probe: float | None = None
    seed: int = 0

    def to_json(self) -> str:
        payload = {
            "epoch": self.epoch,
            "seed": self.seed,
            "reward_mean": self.reward_mean,
            "reward_std": self.reward_std,
            "kl_mean": self.kl_mean,
            "grad_norm": self.grad_norm,
            "per_prompt_reward": {str(k): self.per_prompt_reward[k]
                                  for k in sorted(self.per_prompt_reward)},
        }
        if self.kl_probe is not None:
            payload["kl_probe"] = self.kl_probe
        return json.dumps(payload, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "EpochLog":
        raw = json.loads(line)
        return cls(epoch=raw["epoch"], reward_mean=raw["reward_mean"],
                   reward_std=raw["reward_std"], kl_mean=raw["kl_mean"],
                   grad_norm=raw["grad_norm"], wall_time=0.0,
                   per_prompt_reward={int(k): v for k, v in raw["per_prompt_reward"].items()},
                   kl_probe=raw.get("kl_probe"), seed=raw.get("seed", 0))


@dataclass
class TrainerState:
    """Mutable loop state threaded through epochs."""

    params: DenoiserParams
    opt_state: OptState
    reward_tracker: PerPromptStatTracker
    kl_tracker: PerPromptStatTracker


def _traj_seed(*parts: int | str) -> int:
    # One flat integer per sample stream; Philox keying does the real mixing.
    return stream_key(*parts)[0]


def rlft_epoch(state: TrainerState, params_base: DenoiserParams, prompt_ids,
               cfg: TrainerConfig, mrc_cfg: MrcConfig, schedule: NoiseSchedule,
               rig: ViewRig, epoch: int) -> EpochLog:
    """One on-policy epoch: rollouts, rewards, advantages, one policy update.

    Raises NonFiniteGradient without touching `state` if any gradient is
    non-finite (updates are pure, so the caller's state stays rolled back).
    """
    if len(prompt_ids) == 0:
        raise EmptyCatalog("rlft_epoch needs a non-empty prompt list")
    start = time.monotonic()
    rng = generator(cfg.seed, "batch", epoch)
    prompts = [int(prompt_ids[i]) for i in rng.integers(0, len(prompt_ids),
                                                        size=cfg.batch_size)]
    seeds = [_traj_seed(cfg.seed, "rollout", epoch, i) for i in range(cfg.batch_size)]
    trajs = sample_trajectories(state.params, params_base, prompts, seeds, schedule,
                                cfg.cfg_scale, minibatch=cfg.sample_minibatch)
    rewards = _batch_rewards([traj.x0 for traj in trajs], rig, mrc_cfg, cfg.workers)
    kls = [estimate_kl(traj) for traj in trajs]
    adv_r = state.reward_tracker.update(prompts, rewards)
    adv_kl = state.kl_tracker.update(prompts, kls)

    params, opt_state = state.params, state.opt_state
    grad_norm = 0.0
    if cfg.estimator == "sf":
        _, grads = loss_combined(params, trajs, adv_r, adv_kl, cfg.alpha, cfg.beta,
                                 "sf", schedule, cfg.cfg_scale,
                                 minibatch=cfg.train_minibatch)
        grad_norm = grads_norm(grads)
        params, opt_state = opt_step(params, grads, opt_state)
    else:
        for _ in range(cfg.is_inner_steps):
            _, grads = loss_combined(params, trajs, adv_r, adv_kl, cfg.alpha, cfg.beta,
                                     "is", schedule, cfg.cfg_scale, clip=cfg.is_clip,
                                     minibatch=cfg.train_minibatch)
            grad_norm = grads_norm(grads)
            params, opt_state = opt_step(params, grads, opt_state)
    state.params = params
    state.opt_state = opt_state

    kl_probe = None
    if cfg.kl_probe_prompts:
        probe_seeds = [_traj_seed(cfg.seed, "probe", epoch, i)
                       for i in range(len(cfg.kl_probe_prompts))]
        probe = sample_trajectories(state.params, params_base,
                                    list(cfg.kl_probe_prompts), probe_seeds,
                                    schedule, cfg.cfg_scale,
                                    minibatch=cfg.sample_minibatch)
        kl_probe = float(np.mean([estimate_kl(traj) for traj in probe]))

    per_prompt: dict[int, list[float]] = {}
    for prompt, reward in zip(prompts, rewards):
        per_prompt.setdefault(prompt, []).append(reward)
    return EpochLog(
        epoch=epoch,
        reward_mean=float(np.mean(rewards)),
        reward_std=float(np.std(rewards)),
        kl_mean=float(np.mean(kls)),
        grad_norm=grad_norm,
        wall_time=time.monotonic() - start,
        per_prompt_reward={k: float(np.mean(v)) for k, v in sorted(per_prompt.items())},
        kl_probe=kl_probe,
        seed=cfg.seed,
    )


def early_stop_check(logs: list[EpochLog], threshold: float) -> bool:
    """True once the most recent epoch's mean KL estimate reaches the threshold."""
    return bool(logs) and logs[-1].kl_mean >= threshold


def derive_min_count(cfg: TrainerConfig, num_prompts: int) -> int:
    if cfg.min_count is not None:
        return cfg.min_count
    return 2 * max(1, cfg.batch_size // max(1, num_prompts))


def make_state(params: DenoiserParams, opt_state: OptState, cfg: TrainerConfig,
               num_prompts: int) -> TrainerState:
    min_count = derive_min_count(cfg, num_prompts)
    return TrainerState(
        params=params,
        opt_state=opt_state,
        reward_tracker=PerPromptStatTracker(cfg.window, min_count, cfg.adv_clip),
        kl_tracker=PerPromptStatTracker(cfg.window, min_count, cfg.adv_clip),
    )


def run_rlft(params: DenoiserParams, params_base: DenoiserParams, prompt_ids,
             cfg: TrainerConfig, mrc_cfg: MrcConfig, schedule: NoiseSchedule,
             rig: ViewRig, opt_state: OptState | None = None,
             on_epoch: Callable[[TrainerState, EpochLog], None] | None = None
             ) -> tuple[DenoiserParams, list[EpochLog]]:
    """Full finetuning loop with KL-threshold early stopping."""
    if opt_state is None:
        opt_state = opt_init(params, OptConfig(lr=cfg.lr))
    state = make_state(params, opt_state, cfg, len(prompt_ids))
    logs: list[EpochLog] = []
    for epoch in range(cfg.epochs_max):
        log = rlft_epoch(state, params_base, prompt_ids, cfg, mrc_cfg, schedule,
                         rig, epoch)
        logs.append(log)
        if on_epoch is not None:
            on_epoch(state, log)
        if early_stop_check(logs, cfg.kl_stop_threshold):
            break
    return state.params, logs


# --------------------------------------------------------------------------
# Evaluation, curation, scaling

def evaluate_prompts(params: DenoiserParams, prompt_ids, samples_per_prompt: int,
                     cfg: TrainerConfig, mrc_cfg: MrcConfig, schedule: NoiseSchedule,
                     rig: ViewRig, seed: int, label: str = "eval") -> dict[int, float]:
    """Mean reward per prompt over fresh rollouts sampled under `params`."""
    if len(prompt_ids) == 0:
        raise EmptyCatalog("no prompts to evaluate")
    if samples_per_prompt < 1:
        raise ValueError(f"samples_per_prompt must be >= 1, got {samples_per_prompt}")
    out: dict[int, float] = {}
    for prompt in prompt_ids:
        prompt = int(prompt)
        seeds = [_traj_seed(seed, label, prompt, i) for i in range(samples_per_prompt)]
        trajs = sample_trajectories(params, params, [prompt] * samples_per_prompt,
                                    seeds, schedule, cfg.cfg_scale,
                                    minibatch=cfg.sample_minibatch)
        rewards = _batch_rewards([traj.x0 for traj in trajs], rig, mrc_cfg, cfg.workers)
        out[prompt] = float(np.mean(rewards))
    return out


def curate_prompts(params: DenoiserParams, catalog, k: int, samples_per_prompt: int,
                   cfg: TrainerConfig, mrc_cfg: MrcConfig, schedule: NoiseSchedule,
                   rig: ViewRig, seed: int = 0) -> list[int]:
    """The k catalog prompts with the lowest mean reward (ties: lower id first)."""
    if len(catalog) == 0:
        raise EmptyCatalog("cannot curate an empty catalog")
    if not 1 <= k <= len(catalog):
        raise ValueError(f"k must be in [1, {len(catalog)}], got {k}")
    means = evaluate_prompts(params, catalog, samples_per_prompt, cfg, mrc_cfg,
                             schedule, rig, seed, label="curate")
    ranked = sorted(means.items(), key=lambda item: (item[1], item[0]))
    return [prompt for prompt, _ in ranked[:k]]


SCALING_CSV_HEADER = ("batch", "data", "seed", "epoch", "reward", "kl")


def scaling_run(params_base: DenoiserParams, grid, epochs: int, seeds, catalog,
                cfg: TrainerConfig, mrc_cfg: MrcConfig, schedule: NoiseSchedule,
                rig: ViewRig) -> list[tuple[int, int, int, int, float, float]]:
    """Reward curves over a (batch size, data size) grid, one run per seed.

    Every cell finetunes from the same base parameters on the first `data`
    catalog prompts; rows are (batch, data, seed, epoch, reward, kl).
    """
    rows: list[tuple[int, int, int, int, float, float]] = []
    for batch, data in grid:
        if not 1 <= data <= len(catalog):
            raise EmptyCatalog(f"grid cell wants {data} prompts, catalog has {len(catalog)}")
        for seed in seeds:
            run_cfg = replace(cfg, batch_size=batch, seed=int(seed), epochs_max=epochs)
            _, logs = run_rlft(params_base.copy(), params_base, list(catalog[:data]),
                               run_cfg, mrc_cfg, schedule, rig)
            for log in logs:
                rows.append((batch, data, int(seed), log.epoch,
                             log.reward_mean, log.kl_mean))
    return rows


def write_scaling_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCALING_CSV_HEADER)
        for batch, data, seed, epoch, reward, kl in rows:
            writer.writerow([batch, data, seed, epoch, repr(float(reward)), repr(float(kl))])


def read_scaling_csv(path) -> list[tuple[int, int, int, int, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != SCALING_CSV_HEADER:
            raise DimensionMismatch(f"bad scaling CSV header {header}")
        return [(int(b), int(d), int(s), int(e), float(r), float(k))
                for b, d, s, e, r, k in reader]
