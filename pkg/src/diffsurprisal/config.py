"""Run configuration: a TOML file merged with command-line overrides.

Layout::

    seed = 0

    [mel]
    sample_rate = 22050
    window_len = 2048
    hop_len = 512
    n_mels = 256
    top_db = 80.0
    block_frames = 256

    [schedule]
    kind = "linear"
    T = 1000
    beta_min = 1e-4
    beta_max = 0.02

    [model]
    arch = "mlp"          # or "small_conv"
    hidden = [128, 128]
    channels = 16
    time_embed_dim = 16

    [train]
    batch_size = 64
    steps = 1000
    learning_rate = 1e-3

    [elbo]
    mode = "mc"           # or "exact_sum"
    mc_samples = 64

    [analysis]
    alpha = 0.05
    covariate = "total_nats"
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .audio import MelConfig
from .denoiser import ArchConfig, ConfigError, TrainConfig
from .schedule import NoiseSchedule, make_schedule
from .surprisal import ElboConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = ("mel", "schedule", "model", "train", "elbo", "analysis")
COVARIATES = ("total_nats", "normalized_nats")


@dataclass
class RunConfig:
    seed: int = 0
    mel: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    elbo: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)

    # -- typed views -------------------------------------------------------

    def mel_config(self) -> MelConfig:
        keys = {f.name for f in fields(MelConfig)}
        return MelConfig(**{k: v for k, v in self.mel.items() if k in keys})

    @property
    def block_frames(self) -> int:
        return int(self.mel.get("block_frames", 256))

    def noise_schedule(self) -> NoiseSchedule:
        d = {"kind": "linear", "T": 1000, "beta_min": 1e-4, "beta_max": 0.02, **self.schedule}
        return make_schedule(d["kind"], d["T"], d["beta_min"], d["beta_max"])

    def arch_config(self, input_shape) -> ArchConfig:
        d = dict(self.model)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return ArchConfig(input_shape=tuple(input_shape), **d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)

    def elbo_config(self) -> ElboConfig:
        return ElboConfig(seed=self.seed, **self.elbo)

    @property
    def alpha(self) -> float:
        return float(self.analysis.get("alpha", 0.05))

    @property
    def covariate(self) -> str:
        return str(self.analysis.get("covariate", "total_nats"))

    def validate(self) -> None:
        """Build every typed view once so bad values fail before any work starts."""
        try:
            unknown = set(self.mel) - {f.name for f in fields(MelConfig)} - {"block_frames"}
            if unknown:
                raise ConfigError(f"unknown [mel] keys {sorted(unknown)}")
            self.mel_config()
            if self.block_frames < 1:
                raise ConfigError("block_frames must be at least 1")
            self.noise_schedule()
            self.arch_config((self.mel_config().n_mels, self.block_frames))
            self.train_config()
            e = self.elbo_config()
            if e.mode not in ("exact_sum", "mc") or e.mc_samples < 1:
                raise ConfigError(f"bad elbo settings {self.elbo}")
            if not 0.0 < self.alpha < 1.0:
                raise ConfigError("alpha must lie in (0, 1)")
            if self.covariate not in COVARIATES:
                raise ConfigError(f"covariate must be one of {COVARIATES}")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    unknown = set(raw) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    cfg = RunConfig(seed=int(raw.get("seed", 0)))
    for sec in SECTIONS:
        if sec in raw:
            if not isinstance(raw[sec], dict):
                raise ConfigError(f"{path}: [{sec}] must be a table")
            setattr(cfg, sec, dict(raw[sec]))
    return cfg


def override(cfg: RunConfig, section: str | None, key: str, value) -> RunConfig:
    """Return a copy of ``cfg`` with one value replaced (``None`` leaves it unchanged)."""
    if value is None:
        return cfg
    if section is None:
        return replace(cfg, **{key: value})
    return replace(cfg, **{section: {**getattr(cfg, section), key: value}})
