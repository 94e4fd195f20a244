"""Flat ``key = value`` run configuration.

Lines starting with '#' and blank lines are ignored. Unknown keys are an
error, as are values that do not parse as the key's type.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # schedule
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 1e-2
    # model
    arch: str = "unet1d"
    hidden: int = 256
    depth: int = 3
    channels: tuple = (32, 64)
    blocks: int = 2
    kernel: int = 3
    embed_dim: int = 32
    # training
    lr: float = 0.001
    batch: int = 128
    steps: int = 2000
    weighted: bool = False
    # data
    kind: str = "continuous"
    labeled: bool = False
    header: bool = False
    # sampling
    mode: str = "ddim"
    k: int = 3
    T_use: int = 0  # 0 means every timestep
    n: int = 1000
    sigma_zero: bool = False
    literal: bool = False
    threshold: float = 0.5
    # guidance classifier
    clf_kind: str = "logistic"
    clf_steps: int = 1000
    clf_lr: float = 0.01
    scale: float = 1.0
    # augmentation
    aug_step: int = 200
    seed: int = 0

    def model_hparams(self) -> dict:
        if self.arch == "mlp":
            return {"hidden": self.hidden, "depth": self.depth, "embed_dim": self.embed_dim}
        if self.arch == "unet1d":
            return {"channels": tuple(self.channels), "blocks": self.blocks, "kernel": self.kernel,
                    "embed_dim": self.embed_dim}
        raise ConfigError(f"unknown arch {self.arch!r}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


CHOICES = {"arch": ("mlp", "unet1d"), "kind": ("binary", "continuous"),
           "mode": ("ddpm", "ddim"), "clf_kind": ("logistic", "mlp")}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    value = raw
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
    return value


def defaults() -> dict:
    return {f.name: f.default for f in fields(RunConfig)}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    known = defaults()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, known[key])
    return validate(RunConfig(**values))


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def validate(cfg: RunConfig) -> RunConfig:
    for key, options in CHOICES.items():
        if getattr(cfg, key) not in options:
            raise ConfigError(f"{key} must be one of {options}, got {getattr(cfg, key)!r}")
    for key in ("T", "batch", "n", "aug_step", "hidden", "depth", "blocks", "embed_dim"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if cfg.k < 0 or cfg.steps < 0 or cfg.T_use < 0 or cfg.clf_steps < 0:
        raise ConfigError("k, steps, T_use and clf_steps must be non-negative")
    if not cfg.channels:
        raise ConfigError("channels must list at least one width")
    return cfg


def describe_defaults() -> str:
    return ", ".join(f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}"
                     for k, v in defaults().items())
