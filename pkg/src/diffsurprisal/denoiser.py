"""Noise-prediction networks, their gradients, and Adam training.

Two small reference architectures are provided:

``mlp``
    Flattened input concatenated with a sinusoidal time embedding, SiLU
    hidden layers, linear output.
``small_conv``
    Three 3x3 'same' convolutions (1 -> C -> C -> 1 channels).  The time
    embedding passes through a per-layer linear map and is broadcast-added
    to the first two feature maps before the SiLU.

Gradients are hand-written reverse-mode passes in float64.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .schedule import NoiseSchedule
from .streams import stream

log = logging.getLogger(__name__)

ARCHS = ("mlp", "small_conv")


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class ArchConfig:
    arch: str = "mlp"
    input_shape: tuple[int, ...] = (16, 16)
    hidden: tuple[int, ...] = (128, 128)
    channels: int = 16
    time_embed_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if not self.input_shape or any(s < 1 for s in self.input_shape):
            raise ConfigError(f"bad input_shape {self.input_shape}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be a positive even number")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if self.arch == "small_conv":
            if len(self.input_shape) != 2:
                raise ConfigError("small_conv expects a 2-D input_shape")
            if self.channels < 1:
                raise ConfigError("channels must be positive")

    @property
    def input_dim(self) -> int:
        return math.prod(self.input_shape)

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        D = self.time_embed_dim
        if self.arch == "mlp":
            widths = [self.input_dim + D, *self.hidden, self.input_dim]
            shapes = {}
            for i in range(len(widths) - 1):
                shapes[f"W{i}"] = (widths[i], widths[i + 1])
                shapes[f"b{i}"] = (widths[i + 1],)
            return shapes
        C = self.channels
        return {
            "K0": (3, 3, 1, C), "c0": (C,), "A0": (D, C), "a0": (C,),
            "K1": (3, 3, C, C), "c1": (C,), "A1": (D, C), "a1": (C,),
            "K2": (3, 3, C, 1), "c2": (1,),
        }

    def output_layer(self) -> tuple[str, str]:
        if self.arch == "mlp":
            last = len(self.hidden)
            return f"W{last}", f"b{last}"
        return "K2", "c2"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class DenoiserParams:
    arch: ArchConfig
    weights: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.arch.weight_shapes()
        if set(shapes) != set(self.weights):
            raise ConfigError(f"weight names {sorted(self.weights)} != expected {sorted(shapes)}")
        for name, shape in shapes.items():
            w = np.asarray(self.weights[name], dtype=np.float64)
            if w.shape != shape:
                raise ConfigError(f"{name}: shape {w.shape} != expected {shape}")
            if not np.all(np.isfinite(w)):
                raise ConfigError(f"{name}: non-finite weights")
            self.weights[name] = w

    @property
    def param_count(self) -> int:
        return sum(w.size for w in self.weights.values())

    def copy(self) -> DenoiserParams:
        return DenoiserParams(self.arch, {k: v.copy() for k, v in self.weights.items()})

    def flat(self) -> np.ndarray:
        names = self.arch.weight_shapes()
        return np.concatenate([self.weights[n].ravel() for n in names])

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.arch.to_dict(), sort_keys=True).encode())
        h.update(self.flat().astype("<f8").tobytes())
        return h.hexdigest()[:12]


def init_params(arch: ArchConfig, seed: int = 0, *, zero_output: bool = True) -> DenoiserParams:
    """Fan-in scaled uniform weights, zero biases.

    With ``zero_output`` (the default) the output layer starts at zero, so the
    untrained network predicts zero noise everywhere.
    """
    rng = stream(seed, "init")
    out_w, out_b = arch.output_layer()
    weights = {}
    for name, shape in arch.weight_shapes().items():
        if len(shape) == 1:
            weights[name] = np.zeros(shape)
            continue
        fan_in = math.prod(shape[:-1])
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        weights[name] = np.zeros(shape) if (zero_output and name == out_w) else w
    return DenoiserParams(arch, weights)


def time_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _silu(z):
    s = expit(z)
    return z * s, s


def _silu_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


# ---------------------------------------------------------------------------
# forward / backward passes
# ---------------------------------------------------------------------------

def _mlp_forward(p: DenoiserParams, x, temb):
    w = p.weights
    n_layers = len(p.arch.hidden) + 1
    h = np.concatenate([x.reshape(len(x), -1), temb], axis=1)
    cache = []
    for i in range(n_layers):
        z = h @ w[f"W{i}"] + w[f"b{i}"]
        if i < n_layers - 1:
            a, s = _silu(z)
            cache.append((h, z, s))
            h = a
        else:
            cache.append((h, None, None))
            h = z
    return h.reshape(x.shape), cache


def _mlp_backward(p: DenoiserParams, cache, dout):
    w = p.weights
    grads = {}
    g = dout.reshape(len(dout), -1)
    for i in reversed(range(len(cache))):
        h, z, s = cache[i]
        if z is not None:
            g = g * _silu_grad(z, s)
        grads[f"W{i}"] = h.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ w[f"W{i}"].T
    return grads


def _im2col(x):
    """(B, H, W, C) -> (B, H, W, 3*3*C) patches with zero 'same' padding."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    B, H, W, C = x.shape
    cols = np.empty((B, H, W, 3, 3, C))
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di, dj, :] = xp[:, di:di + H, dj:dj + W, :]
    return cols.reshape(B, H, W, 9 * C)


def _col2im(dcols, shape):
    B, H, W, C = shape
    dcols = dcols.reshape(B, H, W, 3, 3, C)
    dxp = np.zeros((B, H + 2, W + 2, C))
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + H, dj:dj + W, :] += dcols[:, :, :, di, dj, :]
    return dxp[:, 1:-1, 1:-1, :]


def _conv(x, K, bias):
    cols = _im2col(x)
    return cols @ K.reshape(-1, K.shape[-1]) + bias, cols


def _conv_forward(p: DenoiserParams, x, temb):
    w = p.weights
    h = x[..., None]
    cache = []
    for i in range(2):
        z, cols = _conv(h, w[f"K{i}"], w[f"c{i}"])
        z = z + (temb @ w[f"A{i}"] + w[f"a{i}"])[:, None, None, :]
        a, s = _silu(z)
        cache.append((h.shape, cols, z, s))
        h = a
    out, cols = _conv(h, w["K2"], w["c2"])
    cache.append((h.shape, cols, None, None))
    return out[..., 0], cache


def _conv_backward(p: DenoiserParams, cache, dout, temb):
    w = p.weights
    grads = {}
    g = dout[..., None]
    for i in reversed(range(3)):
        in_shape, cols, z, s = cache[i]
        if z is not None:
            g = g * _silu_grad(z, s)
            gsum = g.sum(axis=(1, 2))
            grads[f"A{i}"] = temb.T @ gsum
            grads[f"a{i}"] = gsum.sum(axis=0)
        K = w[f"K{i}"]
        grads[f"K{i}"] = (cols.reshape(-1, cols.shape[-1]).T
                          @ g.reshape(-1, g.shape[-1])).reshape(K.shape)
        grads[f"c{i}"] = g.sum(axis=(0, 1, 2))
        if i > 0:
            g = _col2im(g @ K.reshape(-1, K.shape[-1]).T, in_shape)
    return grads


def _forward(p: DenoiserParams, x, t):
    temb = time_embedding(t, p.arch.time_embed_dim)
    if p.arch.arch == "mlp":
        out, cache = _mlp_forward(p, x, temb)
    else:
        out, cache = _conv_forward(p, x, temb)
    return out, (cache, temb)


def _backward(p: DenoiserParams, state, dout):
    cache, temb = state
    if p.arch.arch == "mlp":
        return _mlp_backward(p, cache, dout)
    return _conv_backward(p, cache, dout, temb)


def _as_batch(p: DenoiserParams, xt, t):
    xt = np.asarray(xt, dtype=np.float64)
    shape = p.arch.input_shape
    if xt.shape == shape:
        single = True
        xt = xt[None]
    elif xt.shape[1:] == shape:
        single = False
    else:
        raise ShapeError(f"input shape {xt.shape} does not match arch input {shape}")
    t = np.broadcast_to(np.asarray(t), (len(xt),))
    return xt, t, single


def predict_noise(params: DenoiserParams, xt, t, *, max_rows: int | None = None) -> np.ndarray:
    """Predicted noise for ``xt`` at step ``t``.

    ``xt`` is either a single input of the architecture's shape or a batch
    with a leading axis; ``t`` is a scalar or one step per batch element.
    """
    xt, t, single = _as_batch(params, xt, t)
    if max_rows is None:
        width = params.arch.channels if params.arch.arch == "small_conv" else max(
            params.arch.hidden, default=1)
        max_rows = max(1, 2 ** 21 // (params.arch.input_dim * width * 9))
    outs = [_forward(params, xt[i:i + max_rows], t[i:i + max_rows])[0]
            for i in range(0, len(xt), max_rows)]
    out = np.concatenate(outs, axis=0)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def _draw_noise(x0, sched: NoiseSchedule, seed):
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "simple_loss")
    t = rng.integers(1, sched.T + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bar_at(t).reshape((-1,) + (1,) * (x0.ndim - 1))
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return xt, t, eps


def _check_batch(params, x0):
    x0 = np.asarray(x0, dtype=np.float64)
    if len(x0) == 0:
        raise ValueError("empty batch")
    if x0.shape[1:] != params.arch.input_shape:
        raise ShapeError(f"batch shape {x0.shape} does not match arch input "
                         f"{params.arch.input_shape}")
    return x0


def simple_loss(params: DenoiserParams, x0, sched: NoiseSchedule, seed) -> float:
    """Batch mean of ||eps - eps_hat(x_t, t)||^2 with t ~ U{1..T}, eps ~ N(0, I).

    ``seed`` is an int or a ``numpy.random.Generator``; the same seed gives the
    same (t, eps) draws as :func:`grad`.
    """
    x0 = _check_batch(params, x0)
    xt, t, eps = _draw_noise(x0, sched, seed)
    resid = eps - predict_noise(params, xt, t, max_rows=len(xt))
    return float(np.mean(np.sum(resid.reshape(len(x0), -1) ** 2, axis=1)))


def loss_and_grad(params: DenoiserParams, x0, sched: NoiseSchedule, seed):
    x0 = _check_batch(params, x0)
    xt, t, eps = _draw_noise(x0, sched, seed)
    out, state = _forward(params, xt, t)
    resid = out - eps
    B = len(x0)
    loss = float(np.mean(np.sum(resid.reshape(B, -1) ** 2, axis=1)))
    grads = _backward(params, state, 2.0 * resid / B)
    return loss, grads


def grad(params: DenoiserParams, x0, sched: NoiseSchedule, seed) -> dict[str, np.ndarray]:
    """Gradient of :func:`simple_loss` with respect to every weight."""
    return loss_and_grad(params, x0, sched, seed)[1]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 1000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("adam_eps must be positive")


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: DenoiserParams) -> OptState:
        return cls({k: np.zeros_like(w) for k, w in params.weights.items()},
                   {k: np.zeros_like(w) for k, w in params.weights.items()})


def adam_step(params: DenoiserParams, grads: dict[str, np.ndarray], opt: OptState,
              cfg: TrainConfig) -> tuple[DenoiserParams, OptState]:
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    step = opt.step + 1
    new_w, new_m, new_v = {}, {}, {}
    for k, w in params.weights.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ShapeError(f"{k}: gradient shape {g.shape} != weight shape {w.shape}")
        m = b1 * opt.m[k] + (1.0 - b1) * g
        v = b2 * opt.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        new_w[k] = w - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[k], new_v[k] = m, v
    return DenoiserParams(params.arch, new_w), OptState(new_m, new_v, step)


def _batches(n: int, batch_size: int, seed: int):
    epoch = 0
    pending = np.empty(0, dtype=np.int64)
    while True:
        while len(pending) < batch_size:
            pending = np.concatenate([pending, stream(seed, "shuffle", epoch).permutation(n)])
            epoch += 1
        yield pending[:batch_size]
        pending = pending[batch_size:]


def train(blocks, cfg: TrainConfig, sched: NoiseSchedule, arch: ArchConfig | None = None,
          params: DenoiserParams | None = None) -> tuple[DenoiserParams, list[float]]:
    """Adam on the simplified noise-prediction loss.

    Starts from ``params`` if given, else ``init_params(arch, cfg.seed)``.
    Returns the final parameters and the per-step training loss.
    """
    data = np.asarray(blocks, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("empty training set")
    if params is None:
        if arch is None:
            arch = ArchConfig(input_shape=data.shape[1:])
        params = init_params(arch, cfg.seed)
    _check_batch(params, data[:1])
    opt = OptState.zeros_like(params)
    losses: list[float] = []
    batches = _batches(len(data), cfg.batch_size, cfg.seed)
    for step in range(cfg.steps):
        idx = next(batches)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_grad(params, data[idx], sched, stream(cfg.seed, "noise", step))
        if not (math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())):
            raise TrainingDiverged(step, loss)
        params, opt = adam_step(params, grads, opt, cfg)
        losses.append(loss)
        if step % 500 == 0:
            log.debug("step %d loss %.5f", step, loss)
    return params, losses


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, params: DenoiserParams, sched: NoiseSchedule,
                    step: int = 0, extra: dict | None = None) -> None:
    """Write a JSON header line followed by the float64 little-endian weights."""
    path = Path(path)
    names = list(params.arch.weight_shapes())
    header = {
        "format": "diffsurprisal-ckpt-1",
        "arch": params.arch.to_dict(),
        "shapes": {n: list(params.weights[n].shape) for n in names},
        "order": names,
        "schedule": sched.to_dict(),
        "step": int(step),
        **(extra or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    _atomic_write(path, blob + params.flat().astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[DenoiserParams, NoiseSchedule, dict]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    try:
        header = json.loads(data[:nl])
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: unreadable checkpoint header") from exc
    arch = ArchConfig.from_dict(header["arch"])
    payload = data[nl + 1:]
    if len(payload) % 8:
        raise ConfigError(f"{path}: truncated weight payload")
    flat = np.frombuffer(payload, dtype="<f8")
    expected = sum(math.prod(header["shapes"][n]) for n in header["order"])
    if flat.size != expected:
        raise ConfigError(f"{path}: payload has {flat.size} values, header describes {expected}")
    weights, pos = {}, 0
    for name in header["order"]:
        shape = tuple(header["shapes"][name])
        size = math.prod(shape)
        weights[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    return DenoiserParams(arch, weights), NoiseSchedule.from_dict(header["schedule"]), header


def write_loss_csv(path: str | Path, losses) -> None:
    lines = ["step,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(losses)]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


__all__ = [
    "ArchConfig", "DenoiserParams", "OptState", "TrainConfig", "ConfigError", "ShapeError",
    "TrainingDiverged", "init_params", "predict_noise", "simple_loss", "grad", "loss_and_grad",
    "adam_step", "train", "save_checkpoint", "load_checkpoint", "write_loss_csv",
    "time_embedding",
]
