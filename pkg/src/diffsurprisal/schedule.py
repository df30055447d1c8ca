"""Discrete-time noise schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step coefficients for a T-step forward process.

    Arrays are stored 0-based (``beta[t - 1]`` is beta_t); use the accessor
    methods to index by step number, where step 0 means "no noise"
    (alpha_bar = 1, SNR = +inf).
    """

    kind: str
    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def snr_values(self) -> np.ndarray:
        return self.alpha_bar / (1.0 - self.alpha_bar)

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"step out of range 0..{self.T}: {t}")
        return t

    def alpha_bar_at(self, t):
        t = self._check(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def beta_at(self, t):
        t = self._check(t)
        if np.any(t < 1):
            raise ValueError("beta is defined for steps 1..T")
        return self.beta[t - 1]

    def alpha_at(self, t):
        return 1.0 - self.beta_at(t)

    def snr(self, t):
        """SNR(t) = alpha_bar_t / (1 - alpha_bar_t); SNR(0) = +inf."""
        ab = self.alpha_bar_at(t)
        with np.errstate(divide="ignore"):
            return np.where(ab >= 1.0, np.inf, ab / np.where(ab >= 1.0, 0.5, 1.0 - ab))

    def posterior_variance(self, t):
        """Variance of q(x_{t-1} | x_t, x_0) for t >= 2.

        That variance is zero at t = 1, so the reverse step (and the decoder)
        uses beta_1 there instead.
        """
        t = np.asarray(t)
        beta = self.beta_at(t)
        var = beta * (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - self.alpha_bar_at(t))
        return np.where(t == 1, beta, var)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_min": self.beta_min,
                "beta_max": self.beta_max}

    @classmethod
    def from_dict(cls, d: dict) -> NoiseSchedule:
        return make_schedule(d["kind"], int(d["T"]), float(d["beta_min"]), float(d["beta_max"]))

    def same_as(self, other: NoiseSchedule) -> bool:
        return self.to_dict() == other.to_dict()


def make_schedule(kind: str = "linear", T: int = 1000, beta_min: float = 1e-4,
                  beta_max: float = 0.02) -> NoiseSchedule:
    if kind != "linear":
        raise InvalidScheduleError(f"unknown schedule kind {kind!r}")
    if int(T) != T or T < 1:
        raise InvalidScheduleError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise InvalidScheduleError(
            f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)
    if T == 1:
        beta = np.array([float(beta_min)])
    else:
        beta = beta_min + np.arange(T) / (T - 1) * (beta_max - beta_min)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if alpha_bar[-1] <= 0.0:
        raise InvalidScheduleError("alpha_bar underflows to zero")
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(kind, T, float(beta_min), float(beta_max), beta, alpha, alpha_bar)
