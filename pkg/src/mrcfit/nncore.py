"""Minimal dense denoiser with exact hand-written gradients.

A three-layer tanh MLP predicts the noise in a flattened 2x2 view tile.
Conditioning (sinusoidal timestep features plus a learned prompt embedding)
is concatenated onto the input.  Gradients are reverse-mode by hand; there
is deliberately no autodiff anywhere, and `fd_check` exists to keep the
backward pass honest against central differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, NonFiniteGradient
from .rng import generator

CKPT_MAGIC = b"CRV3"
CKPT_VERSION = 1

_ARRAY_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3", "prompt_emb")


@dataclass(frozen=True)
class NetDims:
    """Architecture sizes; in_dim is data + timestep features + prompt embedding."""

    data_dim: int
    hidden: int = 256
    embed: int = 16
    freqs: int = 8
    num_prompts: int = 64

    def __post_init__(self) -> None:
        for name in ("data_dim", "hidden", "embed", "freqs", "num_prompts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def in_dim(self) -> int:
        return self.data_dim + 2 * self.freqs + self.embed


@dataclass(frozen=True, eq=False)
class DenoiserParams:
    dims: NetDims
    w1: np.ndarray  # (hidden, in_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, hidden)
    b2: np.ndarray  # (hidden,)
    w3: np.ndarray  # (data_dim, hidden)
    b3: np.ndarray  # (data_dim,)
    prompt_emb: np.ndarray  # (num_prompts + 1, embed); last row is the null prompt

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in _ARRAY_FIELDS]

    def copy(self) -> "DenoiserParams":
        return replace(self, **{name: arr.copy() for name, arr in self.arrays()})


GradDict = dict  # name -> ndarray, same keys/shapes as DenoiserParams.arrays()


def init_params(dims: NetDims, seed: int) -> DenoiserParams:
    """Scaled-Gaussian init; biases start at zero."""
    rng = generator(seed, "init")

    def dense(rows: int, cols: int) -> np.ndarray:
        return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))

    return DenoiserParams(
        dims=dims,
        w1=dense(dims.hidden, dims.in_dim),
        b1=np.zeros(dims.hidden),
        w2=dense(dims.hidden, dims.hidden),
        b2=np.zeros(dims.hidden),
        w3=dense(dims.data_dim, dims.hidden),
        b3=np.zeros(dims.data_dim),
        prompt_emb=rng.normal(0.0, 0.1, size=(dims.num_prompts + 1, dims.embed)),
    )


def freeze(params: DenoiserParams) -> DenoiserParams:
    """Read-only copy; accidental in-place writes raise instead of corrupting."""
    frozen = {}
    for name, arr in params.arrays():
        copy = arr.copy()
        copy.flags.writeable = False
        frozen[name] = copy
    return replace(params, **frozen)


def timestep_features(t: np.ndarray, freqs: int) -> np.ndarray:
    """Sinusoidal features [sin(t * w_k), cos(t * w_k)], w_k geometric in k."""
    rates = np.exp(-np.log(10000.0) * np.arange(freqs) / freqs)
    angles = np.asarray(t, dtype=np.float64)[:, None] * rates[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _as_batch(params: DenoiserParams, x_t: np.ndarray, t, c):
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != params.dims.data_dim:
        raise DimensionMismatch(f"x_t has dim {x.shape[1]}, net expects {params.dims.data_dim}")
    n = x.shape[0]
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    null_row = params.dims.num_prompts
    if c is None:
        rows = np.full(n, null_row, dtype=np.int64)
    else:
        rows = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,)).copy()
        rows[rows < 0] = null_row
    if rows.max() > null_row:
        raise DimensionMismatch(f"prompt id {rows.max()} out of range (< {null_row})")
    return x, t_arr, rows, single


def _forward_cache(params: DenoiserParams, x: np.ndarray, t_arr: np.ndarray,
                   rows: np.ndarray):
    temb = timestep_features(t_arr, params.dims.freqs)
    pemb = params.prompt_emb[rows]
    inp = np.concatenate([x, temb, pemb], axis=1)
    h1 = np.tanh(inp @ params.w1.T + params.b1)
    h2 = np.tanh(h1 @ params.w2.T + params.b2)
    out = h2 @ params.w3.T + params.b3
    return out, (inp, h1, h2)


def forward(params: DenoiserParams, x_t: np.ndarray, t, c) -> np.ndarray:
    """Predicted noise for x_t at training timestep t under prompt c (None = null).

    Accepts a single flat sample (data_dim,) or a batch (n, data_dim); t and c
    broadcast over the batch, and c entries < 0 select the null prompt row.
    """
    x, t_arr, rows, single = _as_batch(params, x_t, t, c)
    out, _ = _forward_cache(params, x, t_arr, rows)
    return out[0] if single else out


def backward(params: DenoiserParams, x_t: np.ndarray, t, c,
             upstream: np.ndarray) -> GradDict:
    """Gradients of sum(forward(...) * upstream) w.r.t. every trainable array.

    The sinusoidal timestep features are fixed, so only the dense layers and
    the prompt embedding receive gradients.
    """
    x, t_arr, rows, single = _as_batch(params, x_t, t, c)
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        up = up[None, :]
    if up.shape != (x.shape[0], params.dims.data_dim):
        raise DimensionMismatch(f"upstream shape {up.shape} does not match output")
    _, (inp, h1, h2) = _forward_cache(params, x, t_arr, rows)

    d_out = up
    g_w3 = d_out.T @ h2
    g_b3 = d_out.sum(axis=0)
    d_h2 = (d_out @ params.w3) * (1.0 - h2 * h2)
    g_w2 = d_h2.T @ h1
    g_b2 = d_h2.sum(axis=0)
    d_h1 = (d_h2 @ params.w2) * (1.0 - h1 * h1)
    g_w1 = d_h1.T @ inp
    g_b1 = d_h1.sum(axis=0)
    d_inp = d_h1 @ params.w1
    d_pemb = d_inp[:, params.dims.data_dim + 2 * params.dims.freqs:]
    g_emb = np.zeros_like(params.prompt_emb)
    np.add.at(g_emb, rows, d_pemb)
    return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2,
            "w3": g_w3, "b3": g_b3, "prompt_emb": g_emb}


def grads_zero(params: DenoiserParams) -> GradDict:
    return {name: np.zeros_like(arr) for name, arr in params.arrays()}


def grads_axpy(acc: GradDict, grads: GradDict, scale: float = 1.0) -> None:
    """acc += scale * grads, in place, fixed field order."""
    for name in _ARRAY_FIELDS:
        acc[name] += scale * grads[name]


def grads_norm(grads: GradDict) -> float:
    return float(np.sqrt(sum(float(np.sum(grads[name] ** 2)) for name in _ARRAY_FIELDS)))


def fd_check(params: DenoiserParams, x_t: np.ndarray, t, c,
             grads: GradDict | None = None, n_samples: int = 64,
             h: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error between `grads` and central differences.

    Checks the gradient of a fixed random projection of the output at
    n_samples randomly chosen scalar parameters.  Entries where both sides
    are below 1e-6 are skipped as numerically unresolvable.  Returns 0 for
    n_samples == 0 (vacuous).
    """
    if n_samples == 0:
        return 0.0
    rng = generator(seed, "fdcheck")
    projection = rng.normal(size=params.dims.data_dim)
    if grads is None:
        grads = backward(params, x_t, t, c, projection)

    def scalar(p: DenoiserParams) -> float:
        return float(forward(p, x_t, t, c) @ projection)

    names = [name for name, _ in params.arrays()]
    worst = 0.0
    for _ in range(n_samples):
        name = names[int(rng.integers(0, len(names)))]
        arr = getattr(params, name)
        flat_index = int(rng.integers(0, arr.size))
        bumped = arr.copy().ravel()
        bumped[flat_index] += h
        plus = scalar(replace(params, **{name: bumped.reshape(arr.shape)}))
        bumped[flat_index] -= 2.0 * h
        minus = scalar(replace(params, **{name: bumped.reshape(arr.shape)}))
        fd = (plus - minus) / (2.0 * h)
        an = float(grads[name].ravel()[flat_index])
        denom = max(abs(fd), abs(an))
        if denom < 1e-6:
            continue
        worst = max(worst, abs(fd - an) / denom)
    return worst


# --------------------------------------------------------------------------
# Optimizer: AdamW with decoupled weight decay

@dataclass(frozen=True)
class OptConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass(frozen=True, eq=False)
class OptState:
    config: OptConfig
    step: int
    m: GradDict
    v: GradDict


def opt_init(params: DenoiserParams, config: OptConfig = OptConfig()) -> OptState:
    return OptState(config=config, step=0, m=grads_zero(params), v=grads_zero(params))


def opt_step(params: DenoiserParams, grads: GradDict,
             state: OptState) -> tuple[DenoiserParams, OptState]:
    """One decoupled-weight-decay Adam update; pure, returns new params and state.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    """
    cfg = state.config
    for name in _ARRAY_FIELDS:
        if not np.isfinite(grads[name]).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    step = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** step
    bc2 = 1.0 - cfg.beta2 ** step
    new_params = {}
    new_m = {}
    new_v = {}
    for name, p in params.arrays():
        g = grads[name]
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * p
        new_params[name] = p - cfg.lr * update
        new_m[name] = m
        new_v[name] = v
    return (replace(params, **new_params),
            OptState(config=cfg, step=step, m=new_m, v=new_v))


# --------------------------------------------------------------------------
# Checkpoints: magic "CRV3", version, dims, then f64 LE arrays in field order

def save_checkpoint(params: DenoiserParams, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        d = params.dims
        fh.write(struct.pack("<6I", CKPT_VERSION, d.data_dim, d.hidden, d.embed,
                             d.freqs, d.num_prompts))
        for _, arr in params.arrays():
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str | Path) -> DenoiserParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise DimensionMismatch(f"bad checkpoint magic {raw[:4]!r}")
    version, data_dim, hidden, embed, freqs, num_prompts = struct.unpack_from("<6I", raw, 4)
    if version != CKPT_VERSION:
        raise DimensionMismatch(f"unsupported checkpoint version {version}")
    dims = NetDims(data_dim=data_dim, hidden=hidden, embed=embed, freqs=freqs,
                   num_prompts=num_prompts)
    shapes = {
        "w1": (dims.hidden, dims.in_dim), "b1": (dims.hidden,),
        "w2": (dims.hidden, dims.hidden), "b2": (dims.hidden,),
        "w3": (dims.data_dim, dims.hidden), "b3": (dims.data_dim,),
        "prompt_emb": (dims.num_prompts + 1, dims.embed),
    }
    offset = 4 + struct.calcsize("<6I")
    arrays = {}
    for name in _ARRAY_FIELDS:
        shape = shapes[name]
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(raw):
        raise DimensionMismatch(f"checkpoint has {len(raw) - offset} trailing bytes")
    return DenoiserParams(dims=dims, **arrays)
