"""Forward noising, reverse steps and the per-sample variational bound.

The bound on -log p(x0), in nats, is split into

* ``recon_l0``  -- -log p(x0 | x1) under a Gaussian decoder with variance sigma_1^2,
* ``diffusion_lt`` -- the sum over t = 2..T of KL(q(x_{t-1}|x_t,x0) || p(x_{t-1}|x_t)),
  each written as 0.5 * (SNR(t-1)/SNR(t) - 1) * ||eps - eps_hat(x_t, t)||^2,
* ``prior_lt`` -- KL(q(x_T | x0) || N(0, I)).

``model`` arguments accept a :class:`~diffsurprisal.denoiser.DenoiserParams` or any
callable ``f(xt_batch, t_batch) -> eps_hat_batch``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserParams, ShapeError, predict_noise
from .schedule import NoiseSchedule
from .streams import stream

LOG_2PI = math.log(2.0 * math.pi)
MODES = ("exact_sum", "mc")


@dataclass
class ElboBreakdown:
    recon_l0: float
    diffusion_lt: float
    prior_lt: float
    total: float
    mc_samples: int
    stderr: float
    seed: int = 0
    mode: str = "exact_sum"

    def to_dict(self) -> dict:
        return {
            "recon_l0": self.recon_l0,
            "diffusion_lt": self.diffusion_lt,
            "prior_lt": self.prior_lt,
            "total": self.total,
            "mc_samples": self.mc_samples,
            "stderr": self.stderr if math.isfinite(self.stderr) else None,
            "seed": self.seed,
            "mode": self.mode,
        }


def _check_step(t, sched: NoiseSchedule, lo: int = 1):
    if not lo <= int(t) <= sched.T:
        raise ValueError(f"step {t} outside {lo}..{sched.T}")
    return int(t)


def _expand(coef, ndim):
    return np.asarray(coef, dtype=np.float64).reshape((-1,) + (1,) * (ndim - 1))


def _eps_hat(model, xt, t):
    """Batched noise prediction; ``xt`` has a leading batch axis."""
    t = np.broadcast_to(np.asarray(t), (len(xt),))
    if isinstance(model, DenoiserParams):
        return predict_noise(model, xt, t)
    out = np.asarray(model(xt, t), dtype=np.float64)
    if out.shape != xt.shape:
        raise ShapeError(f"denoiser returned shape {out.shape}, expected {xt.shape}")
    return out


def forward_sample(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = sched.alpha_bar_at(_check_step(t, sched))
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def reverse_mean(model, xt, t, sched: NoiseSchedule) -> np.ndarray:
    """mu(x_t, t) for a batch; ``t`` scalar or per-row."""
    t = np.broadcast_to(np.asarray(t), (len(xt),))
    beta = _expand(sched.beta_at(t), xt.ndim)
    ab = _expand(sched.alpha_bar_at(t), xt.ndim)
    eps_hat = _eps_hat(model, xt, t)
    return (xt - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)


def reverse_step(model, xt, t: int, sched: NoiseSchedule, noise) -> np.ndarray:
    """One draw from p(x_{t-1} | x_t) given standard-normal ``noise``."""
    t = _check_step(t, sched)
    xt = np.asarray(xt, dtype=np.float64)
    mean = reverse_mean(model, xt[None], t, sched)[0]
    return mean + math.sqrt(sched.posterior_variance(t)) * np.asarray(noise, dtype=np.float64)


def diffusion_weight(sched: NoiseSchedule, t):
    """0.5 * (SNR(t-1) / SNR(t) - 1), defined for t >= 2."""
    t = np.asarray(t)
    if np.any(t < 2):
        raise ValueError("diffusion terms are defined for t = 2..T")
    return 0.5 * (sched.snr(t - 1) / sched.snr(t) - 1.0)


def diffusion_loss_term(x0, t: int, model, sched: NoiseSchedule, eps) -> float:
    """Single-draw estimate of the step-t diffusion KL, in nats."""
    t = _check_step(t, sched, lo=2)
    xt = forward_sample(x0, t, eps, sched)
    resid = np.asarray(eps) - _eps_hat(model, xt[None], t)[0]
    return float(diffusion_weight(sched, t) * np.sum(resid ** 2))


def prior_kl(x0, alpha_bar_T: float) -> float:
    """KL(N(sqrt(abar) x0, (1 - abar) I) || N(0, I))."""
    x0 = np.asarray(x0, dtype=np.float64)
    ab = float(alpha_bar_T)
    per_dim = ab * x0 ** 2 + (1.0 - ab) - 1.0 - math.log1p(-ab)
    return float(0.5 * np.sum(per_dim))


def prior_loss(x0, sched: NoiseSchedule) -> float:
    return prior_kl(x0, sched.alpha_bar[-1])


def gaussian_nll(x, mean, var: float) -> float:
    """-log N(x; mean, var I) summed over elements."""
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum((x - np.asarray(mean)) ** 2)
    return float(0.5 * x.size * (LOG_2PI + math.log(var)) + 0.5 * sq / var)


def reconstruction_loss(x0, model, sched: NoiseSchedule, eps) -> float:
    """-log p(x0 | x1) with x1 = forward_sample(x0, 1, eps)."""
    x1 = forward_sample(x0, 1, eps, sched)
    mean = reverse_mean(model, x1[None], 1, sched)[0]
    return gaussian_nll(x0, mean, float(sched.posterior_variance(1)))


# ---------------------------------------------------------------------------
# batched estimators
# ---------------------------------------------------------------------------

def _recon_batch(x0, model, sched, eps):
    x1 = math.sqrt(sched.alpha_bar[0]) * x0 + math.sqrt(1.0 - sched.alpha_bar[0]) * eps
    mean = reverse_mean(model, x1, 1, sched)
    var = float(sched.posterior_variance(1))
    sq = np.sum((x0 - mean).reshape(len(eps), -1) ** 2, axis=1)
    return 0.5 * x0.size * (LOG_2PI + math.log(var)) + 0.5 * sq / var


def _diffusion_batch(x0, model, sched, t, eps):
    ab = _expand(sched.alpha_bar_at(t), eps.ndim)
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    resid = (eps - _eps_hat(model, xt, t)).reshape(len(eps), -1)
    return diffusion_weight(sched, t) * np.sum(resid ** 2, axis=1)


def _rows_per_call(x0) -> int:
    return max(1, 2 ** 16 // max(1, x0.size))


def elbo(x0, model, sched: NoiseSchedule, mode: str = "exact_sum", mc_samples: int = 1,
         seed: int = 0) -> ElboBreakdown:
    """Variational upper bound on -log p(x0), in nats.

    ``exact_sum`` visits every step t = 2..T with ``mc_samples`` noise draws
    per step.  ``mc`` draws ``mc_samples`` pairs (t, eps) with t uniform on
    2..T and scales the mean term by T - 1.  Noise for step t in exact mode
    comes from the stream ``(seed, "elbo", t)``, so the result does not
    depend on evaluation order.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    n = int(mc_samples)
    if n < 1:
        raise ValueError("mc_samples must be at least 1")
    x0 = np.asarray(x0, dtype=np.float64)
    shape = (n,) + x0.shape
    T = sched.T

    prior = prior_loss(x0, sched)
    recon_eps = stream(seed, "elbo", 1).standard_normal(shape)
    recon = _recon_batch(x0, model, sched, recon_eps)
    diff = np.zeros(n)

    if T >= 2 and mode == "exact_sum":
        per_call = max(1, _rows_per_call(x0) // n)
        for start in range(2, T + 1, per_call):
            steps = np.arange(start, min(start + per_call, T + 1))
            eps = np.concatenate([stream(seed, "elbo", int(t)).standard_normal(shape)
                                  for t in steps])
            terms = _diffusion_batch(x0, model, sched, np.repeat(steps, n), eps)
            diff += terms.reshape(len(steps), n).sum(axis=0)
    elif T >= 2:
        rng = stream(seed, "elbo", "mc")
        steps = rng.integers(2, T + 1, size=n)
        eps = rng.standard_normal(shape)
        rows = _rows_per_call(x0)
        for i in range(0, n, rows):
            diff[i:i + rows] = (T - 1) * _diffusion_batch(
                x0, model, sched, steps[i:i + rows], eps[i:i + rows])

    totals = recon + diff + prior
    stderr = float(np.std(totals, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    r, d = float(np.mean(recon)), float(np.mean(diff))
    return ElboBreakdown(r, d, prior, r + d + prior, n, stderr, int(seed), mode)


def ancestral_sample(model, sched: NoiseSchedule, shape, seed: int = 0,
                     n: int | None = None) -> np.ndarray:
    """Draw x_T ~ N(0, I) and apply reverse steps T..1 (no noise at t = 1).

    With ``n`` set, ``n`` independent samples are drawn at once and the result
    has shape ``(n, *shape)``.
    """
    full = tuple(shape) if n is None else (int(n),) + tuple(shape)
    x = stream(seed, "sample", "prior").standard_normal(full)
    if n is None:
        x = x[None]
    for t in range(sched.T, 0, -1):
        mean = reverse_mean(model, x, t, sched)
        if t > 1:
            noise = stream(seed, "sample", t).standard_normal(full).reshape(x.shape)
            x = mean + math.sqrt(sched.posterior_variance(t)) * noise
        else:
            x = mean
    return x if n is not None else x[0]
