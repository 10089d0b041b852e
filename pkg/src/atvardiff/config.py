"""Flat ``key = value`` run configuration with profiles.

Resolution order: flags override the config file, which overrides profile
defaults. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    iters_per_epoch: int = 100
    batch_size: int = 8
    lr_start: float = 1e-4
    lr_end: float = 5e-6
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.5
    crop_size: int = 32
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    seed: int = 0
    dataset: str = ""
    checkpoint_dir: str = "checkpoints"
    ablation: str = "none"
    base_width: int = 32
    latent_channels: int = 4
    time_dim: int = 64
    log_every: int = 10
    checkpoint_every: int = 1
    precision: str = "float32"
    workers: int = 1

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iters_per_epoch

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    def validate(self) -> None:
        for name in ("epochs", "iters_per_epoch", "batch_size", "crop_size", "T", "base_width", "latent_channels", "time_dim", "log_every", "checkpoint_every", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not (0 < self.lr_end <= self.lr_start):
            raise ConfigError("need 0 < lr_end <= lr_start")
        if min(self.lambdas) < 0:
            raise ConfigError("lambda weights must be non-negative")
        if self.ablation not in ("none", "simple-ddpm"):
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.crop_size % 2 or self.time_dim % 2:
            raise ConfigError("crop_size and time_dim must be even")


@dataclass
class SimulateConfig:
    clean_dir: str = ""
    out: str = ""
    pairs: int = 100
    procedural: int = 0
    crop_size: int = 32
    d_r0_lo: float = 0.5
    d_r0_hi: float = 2.0
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if not self.out:
            raise ConfigError("simulate needs an output directory")
        if not self.clean_dir and self.procedural < 1:
            raise ConfigError("simulate needs a clean image directory or procedural > 0")
        if self.pairs < 1 or self.crop_size < 2 or self.workers < 1:
            raise ConfigError("pairs, crop_size and workers must be positive")
        if not (0 <= self.d_r0_lo <= self.d_r0_hi):
            raise ConfigError("need 0 <= d_r0_lo <= d_r0_hi")


@dataclass
class EvalConfig:
    checkpoint: str = ""
    dataset: str = ""
    out: str = ""
    seed: int = 0
    workers: int = 1
    chunk_size: int = 50
    patch: int = 7
    n_patches: int = 10_000
    limit: int = 0

    def validate(self) -> None:
        if not (self.checkpoint and self.dataset and self.out):
            raise ConfigError("eval needs checkpoint, dataset and out")
        if min(self.workers, self.chunk_size, self.patch, self.n_patches) < 1 or self.limit < 0:
            raise ConfigError("workers, chunk_size, patch and n_patches must be positive")


@dataclass
class RestoreConfig:
    checkpoint: str = ""
    out: str = ""
    seed: int = 0
    workers: int = 1
    chunk_size: int = 16

    def validate(self) -> None:
        if not (self.checkpoint and self.out):
            raise ConfigError("restore needs checkpoint and out")
        if self.workers < 1 or self.chunk_size < 1:
            raise ConfigError("workers and chunk_size must be positive")


PROFILES: dict[str, dict[str, Any]] = {
    "paper": dict(epochs=200, iters_per_epoch=1500, batch_size=16, crop_size=160, T=1000, beta_start=1e-4, beta_end=0.02),
    "desk": dict(epochs=20, iters_per_epoch=100, batch_size=8, crop_size=32, T=100, beta_start=1e-3, beta_end=0.2),
}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _coerce(kind, key: str, value):
    if isinstance(value, str):
        try:
            if kind is int:
                return int(value)
            if kind is float:
                return float(value)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None
    return kind(value) if kind in (int, float, str) else value


def resolve(cls, profile: str | None = None, config_path=None, overrides: dict[str, Any] | None = None):
    """Build ``cls`` from profile defaults, an optional file, then overrides."""
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    values: dict[str, Any] = {}
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        values.update({k: v for k, v in PROFILES[profile].items() if k in known})
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        from_file = parse_config_text(path.read_text())
        unknown = sorted(set(from_file) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(from_file)
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
        if value is not None:
            values[key] = value
    cfg = cls(**{k: _coerce(hints[k], k, v) for k, v in values.items()})
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg


def dump(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())
