"""DDIM-style sampling viewed as a Gaussian policy, plus denoiser pretraining.

Each reverse transition is N(mean, sigma^2 I) with the mean affine in the
predicted noise, so exact per-step log-probs (and their gradients through
the denoiser) are available to the finetuning machinery.  Classifier-free
guidance mixes the conditional and null-prompt predictions before the
transition is formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, NonPositiveSigma
from .nncore import DenoiserParams, OptConfig, backward, forward, opt_init, opt_step
from .rng import generator

DEFAULT_T_TRAIN = 50
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_S_INFER = 20
DEFAULT_ETA = 1.0
DEFAULT_CFG_SCALE = 5.0
DEFAULT_DROP_PROB = 0.1

# Pretraining step size; larger values were swept on the default world and
# bought nothing (the narrow net's denoising loss floors near 1.0 either way),
# so this stays at the optimizer's published default.
DEFAULT_SFT_LR = 3e-4


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Forward-process constants and the inference-time step grid.

    taus holds s_infer + 1 training indices, strictly decreasing from
    t_train - 1 down to 0; transition i runs taus[i] -> taus[i+1].  The
    terminal index 0 keeps alpha_bar < 1, so every transition has positive
    sigma when eta > 0 and the policy density exists at every step.
    """

    t_train: int
    s_infer: int
    eta: float
    betas: np.ndarray        # (t_train,)
    alpha_bars: np.ndarray   # (t_train,), strictly decreasing in (0, 1)
    taus: np.ndarray         # (s_infer + 1,) ints
    sigmas: np.ndarray       # (s_infer,) transition noise scales
    k_state: np.ndarray      # (s_infer,) mean coefficient on x_t
    k_noise: np.ndarray      # (s_infer,) mean coefficient on the predicted noise


def make_schedule(t_train: int = DEFAULT_T_TRAIN, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END, s_infer: int = DEFAULT_S_INFER,
                  eta: float = DEFAULT_ETA) -> NoiseSchedule:
    """Linear-beta schedule with an evenly spaced inference subsequence.

    The transition mean is written as k_state * x_t + k_noise * eps_hat,
    algebraically identical to the usual x0-prediction form
    sqrt(ab_lo) * x0_hat + sqrt(1 - ab_lo - sigma^2) * eps_hat.
    """
    if t_train < 2:
        raise ValueError(f"t_train must be >= 2, got {t_train}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= s_infer <= t_train:
        raise ValueError(f"s_infer must be in [1, {t_train}], got {s_infer}")
    if eta < 0.0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    betas = np.linspace(beta_start, beta_end, t_train)
    alpha_bars = np.cumprod(1.0 - betas)
    taus = np.round(np.linspace(t_train - 1, 0, s_infer + 1)).astype(np.int64)
    if not (np.diff(taus) < 0).all():
        raise ValueError(f"s_infer {s_infer} too dense for {t_train} training steps")
    ab_hi = alpha_bars[taus[:-1]]
    ab_lo = alpha_bars[taus[1:]]
    sigmas = eta * np.sqrt((1.0 - ab_lo) / (1.0 - ab_hi)) * np.sqrt(1.0 - ab_hi / ab_lo)
    k_state = np.sqrt(ab_lo / ab_hi)
    k_noise = (np.sqrt(np.maximum(0.0, 1.0 - ab_lo - sigmas ** 2))
               - k_state * np.sqrt(1.0 - ab_hi))
    return NoiseSchedule(t_train=t_train, s_infer=s_infer, eta=eta, betas=betas,
                         alpha_bars=alpha_bars, taus=taus, sigmas=sigmas,
                         k_state=k_state, k_noise=k_noise)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward noising: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if not 0 <= t < schedule.t_train:
        raise ValueError(f"t must be in [0, {schedule.t_train}), got {t}")
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def guided_noise(params: DenoiserParams, x_t: np.ndarray, t, c,
                 cfg_scale: float) -> np.ndarray:
    """Classifier-free guided prediction: eps_u + scale * (eps_c - eps_u).

    c None collapses to the unconditional branch (single forward); scale 1
    collapses to the conditional branch.
    """
    if c is None:
        return forward(params, x_t, t, None)
    eps_c = forward(params, x_t, t, c)
    if cfg_scale == 1.0:
        return eps_c
    eps_u = forward(params, x_t, t, None)
    return eps_u + cfg_scale * (eps_c - eps_u)


def ddim_step_distribution(params: DenoiserParams, x_t: np.ndarray, step: int, c,
                           schedule: NoiseSchedule,
                           cfg_scale: float = DEFAULT_CFG_SCALE
                           ) -> tuple[np.ndarray, float]:
    """Gaussian transition (mean, sigma) for inference step `step`."""
    if not 0 <= step < schedule.s_infer:
        raise ValueError(f"step must be in [0, {schedule.s_infer}), got {step}")
    eps_hat = guided_noise(params, x_t, int(schedule.taus[step]), c, cfg_scale)
    mean = schedule.k_state[step] * np.asarray(x_t) + schedule.k_noise[step] * eps_hat
    return mean, float(schedule.sigmas[step])


def gaussian_log_prob(action: np.ndarray, mean: np.ndarray, sigma: float) -> float:
    """log N(action; mean, sigma^2 I) for an isotropic Gaussian."""
    if sigma <= 0.0:
        raise NonPositiveSigma(f"sigma must be > 0, got {sigma}")
    a = np.asarray(action, dtype=np.float64)
    m = np.asarray(mean, dtype=np.float64)
    if a.shape != m.shape:
        raise DimensionMismatch(f"action shape {a.shape} vs mean shape {m.shape}")
    d = a.size
    diff = a - m
    return float(-0.5 * d * math.log(2.0 * math.pi * sigma * sigma)
                 - float(diff @ diff) / (2.0 * sigma * sigma))


@dataclass(frozen=True, eq=False)
class StepRecord:
    """One reverse transition; x_t aliases the previous action (no copies)."""

    t: int
    x_t: np.ndarray
    mean: np.ndarray
    sigma: float
    action: np.ndarray
    logp_current: float
    logp_base: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    prompt: int | None
    x_init: np.ndarray
    steps: tuple[StepRecord, ...]

    @property
    def x0(self) -> np.ndarray:
        """The final action array itself, unclamped; rewards clamp their own copy."""
        return self.steps[-1].action


def sample_trajectory(params: DenoiserParams, params_base: DenoiserParams, c,
                      seed: int, schedule: NoiseSchedule,
                      cfg_scale: float = DEFAULT_CFG_SCALE) -> Trajectory:
    """Roll one denoising chain from N(0, I), recording both policies' log-probs.

    The action at each step is scored under the sampling parameters and,
    on identical actions, under the frozen base; passing the same object
    for both skips the second forward pass and records equal log-probs.
    """
    [traj] = sample_trajectories(params, params_base, [c], [seed], schedule, cfg_scale,
                                 minibatch=1)
    return traj


def sample_trajectories(params: DenoiserParams, params_base: DenoiserParams,
                        prompts, seeds, schedule: NoiseSchedule,
                        cfg_scale: float = DEFAULT_CFG_SCALE,
                        minibatch: int = 16) -> list[Trajectory]:
    """Batched rollouts; sample i draws only from its own stream keyed by seeds[i]."""
    if len(prompts) != len(seeds):
        raise DimensionMismatch(f"{len(prompts)} prompts for {len(seeds)} seeds")
    out: list[Trajectory] = []
    for lo in range(0, len(prompts), minibatch):
        out.extend(_rollout_chunk(params, params_base, prompts[lo:lo + minibatch],
                                  seeds[lo:lo + minibatch], schedule, cfg_scale))
    return out


def _guided_noise_batch(params: DenoiserParams, x: np.ndarray, t: int,
                        rows: np.ndarray, cfg_scale: float) -> np.ndarray:
    stacked = np.vstack([x, x])
    cs = np.concatenate([rows, np.full(len(rows), -1, dtype=np.int64)])
    eps = forward(params, stacked, t, cs)
    eps_c, eps_u = eps[:len(rows)], eps[len(rows):]
    return eps_u + cfg_scale * (eps_c - eps_u)


def _rollout_chunk(params, params_base, prompts, seeds, schedule, cfg_scale):
    n = len(prompts)
    d = params.dims.data_dim
    rngs = [generator(seed, "traj") for seed in seeds]
    x = np.stack([rng.normal(size=d) for rng in rngs])
    x_prev: list[np.ndarray] = [x[i] for i in range(n)]
    rows = np.array([params.dims.num_prompts if c is None else int(c) for c in prompts])
    records: list[list[StepRecord]] = [[] for _ in range(n)]
    shared = params_base is params
    for step in range(schedule.s_infer):
        t = int(schedule.taus[step])
        sigma = float(schedule.sigmas[step])
        if sigma <= 0.0:
            raise NonPositiveSigma(f"step {step} has sigma {sigma}")
        eps_hat = _guided_noise_batch(params, x, t, rows, cfg_scale)
        means = schedule.k_state[step] * x + schedule.k_noise[step] * eps_hat
        noise = np.stack([rng.normal(size=d) for rng in rngs])
        actions = means + sigma * noise
        if shared:
            means_base = means
        else:
            eps_base = _guided_noise_batch(params_base, x, t, rows, cfg_scale)
            means_base = schedule.k_state[step] * x + schedule.k_noise[step] * eps_base
        for i in range(n):
            logp_cur = gaussian_log_prob(actions[i], means[i], sigma)
            logp_base = logp_cur if shared else gaussian_log_prob(actions[i], means_base[i], sigma)
            records[i].append(StepRecord(t=t, x_t=x_prev[i], mean=means[i], sigma=sigma,
                                         action=actions[i], logp_current=logp_cur,
                                         logp_base=logp_base))
        x = actions
        x_prev = [actions[i] for i in range(n)]
    return [Trajectory(prompt=prompts[i], x_init=records[i][0].x_t,
                       steps=tuple(records[i])) for i in range(n)]


def sft_train(params: DenoiserParams, dataset, steps: int,
              drop_prob: float = DEFAULT_DROP_PROB, seed: int = 0,
              schedule: NoiseSchedule | None = None,
              opt: OptConfig | None = None) -> tuple[DenoiserParams, list[float]]:
    """Denoising pretraining: mean-squared noise-prediction error, one sample per step.

    Each step draws (x0, prompt) from the dataset, a uniform timestep, and
    Gaussian noise; with probability drop_prob the prompt is replaced by the
    null embedding so the guided sampler has an unconditional branch.
    Returns the updated parameters and the per-step loss history;
    steps == 0 returns the inputs untouched.
    """
    if len(dataset) == 0:
        raise EmptyDataset("sft_train needs at least one (x0, prompt) pair")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if not 0.0 <= drop_prob <= 1.0:
        raise ValueError(f"drop_prob must be in [0, 1], got {drop_prob}")
    if schedule is None:
        schedule = make_schedule()
    if opt is None:
        opt = OptConfig(lr=DEFAULT_SFT_LR)
    rng = generator(seed, "sft")
    state = opt_init(params, opt)
    losses: list[float] = []
    d = params.dims.data_dim
    for _ in range(steps):
        x0, c = dataset[int(rng.integers(0, len(dataset)))]
        t = int(rng.integers(0, schedule.t_train))
        eps = rng.normal(size=d)
        x_t = q_sample(x0, t, eps, schedule)
        c_eff = None if rng.uniform() < drop_prob else c
        pred = forward(params, x_t, t, c_eff)
        diff = pred - eps
        losses.append(float(diff @ diff) / d)
        grads = backward(params, x_t, t, c_eff, (2.0 / d) * diff)
        params, state = opt_step(params, grads, state)
    return params, losses
