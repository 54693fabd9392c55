"""Training configuration: every hyperparameter, key=value serialization.

Parsing and serialization round-trip exactly; unknown keys are hard errors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

ENCODER_MODES = ("shared", "mae_only", "contrastive_only", "fusion")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    p_mask: float = 0.6
    p_drop: float = 0.2
    lr: float = 0.001
    weight_decay: float = 0.0001
    epochs: int = 300
    alpha: float = 0.3        # contrastive weight
    lambda_: float = 0.3      # structure-reconstruction weight, key "lambda"
    mu: float = 0.5           # variance-discrimination weight
    tau: float = 0.5          # InfoNCE temperature
    gamma: float = 2.0        # cosine-error exponent
    var_epsilon: float = 1e-4
    d_hidden: int = 512
    d_proj: int = 0           # 0 means "track d_hidden"
    depth: int = 2
    encoder_mode: str = "shared"
    block_size: int = 512
    seed: int = 0
    remask_decoder: bool = False
    variance_literal: bool = False
    probe_every: int = 10
    probe_sample_size: int = 64

    def validate(self) -> "TrainConfig":
        for name in ("p_mask", "p_drop"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        for name in ("alpha", "lambda_", "mu"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.gamma <= 1:
            raise ConfigError("gamma must be > 1")
        if self.var_epsilon <= 0:
            raise ConfigError("var_epsilon must be positive")
        if self.d_hidden < 1 or self.depth < 1 or self.d_proj < 0:
            raise ConfigError("dims and depth must be positive")
        if self.block_size < 2:
            raise ConfigError("block_size must be >= 2")
        if self.encoder_mode not in ENCODER_MODES:
            raise ConfigError(f"encoder_mode must be one of {ENCODER_MODES}")
        if self.encoder_mode == "mae_only" and self.alpha != 0.0:
            raise ConfigError("mae_only mode requires alpha=0 (no contrastive branch)")
        if self.encoder_mode == "contrastive_only" and self.lambda_ != 0.0:
            raise ConfigError("contrastive_only mode requires lambda=0 (no decoder output)")
        if self.probe_every < 0 or self.probe_sample_size < 1:
            raise ConfigError("probe settings must be positive")
        return self

    @property
    def proj_dim(self) -> int:
        return self.d_proj if self.d_proj else self.d_hidden

    def with_overrides(self, **kv) -> "TrainConfig":
        return replace(self, **kv).validate()


def _key(field_name: str) -> str:
    return "lambda" if field_name == "lambda_" else field_name


_FIELDS = {_key(f.name): f for f in fields(TrainConfig)}


def serialize_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.type == "bool" or isinstance(v, bool):
            text = "true" if v else "false"
        else:
            text = repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{_key(f.name)}={text}")
    return "\n".join(lines) + "\n"


def _parse_value(field, raw: str):
    t = field.type
    if t == "bool":
        if raw not in ("true", "false"):
            raise ConfigError(f"{_key(field.name)}: expected true/false, got {raw!r}")
        return raw == "true"
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{_key(field.name)}: bad value {raw!r}") from exc
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse key=value lines; '#' starts a comment, unknown keys are errors."""
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        field = _FIELDS.get(key)
        if field is None:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        kv[field.name] = _parse_value(field, raw)
    cfg = replace(base or TrainConfig(), **kv)
    return cfg.validate()


def apply_overrides(cfg: TrainConfig, pairs: list[str]) -> TrainConfig:
    """Apply CLI --set key=value overrides on top of a parsed config."""
    kv = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        field = _FIELDS.get(key.strip())
        if field is None:
            raise ConfigError(f"unknown config key {key.strip()!r}")
        kv[field.name] = _parse_value(field, raw.strip())
    return replace(cfg, **kv).validate()


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:16]
