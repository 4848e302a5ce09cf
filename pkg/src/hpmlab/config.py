"""Training configuration and its `key = value` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .masking import EASY_TO_HARD, MaskSchedule
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # mask schedule
    gamma: float = 0.75
    alpha_0: float = 0.0
    alpha_T: float = 0.5
    mask_mode: str = "argmax"
    direction: str = EASY_TO_HARD
    learn_to_mask: bool = True
    # objectives
    pred_loss: str = "relative"  # relative | absolute | none
    target: str = "pixel"  # pixel | ema
    # optimization
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 4e-3  # the ImageNet value 1.5e-4 never leaves the mean-patch plateau here
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    momentum: float = 0.996
    # architecture
    enc_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    mlp_ratio: int = 4
    # bookkeeping
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 10

    def __post_init__(self):
        self.validate()

    @property
    def lr(self) -> float:
        """Base LR scaled by the linear batch-size rule."""
        return self.base_lr * self.batch_size / 256

    def schedule(self) -> MaskSchedule:
        return MaskSchedule(self.gamma, self.alpha_0, self.alpha_T, self.epochs, self.mask_mode, self.direction)

    def model_config(self, grid, patch_dim: int) -> ModelConfig:
        return ModelConfig(
            grid=tuple(grid),
            patch_dim=patch_dim,
            target_dim=self.enc_dim if self.target == "ema" else None,
            enc_dim=self.enc_dim, enc_depth=self.enc_depth, enc_heads=self.enc_heads,
            dec_dim=self.dec_dim, dec_depth=self.dec_depth, dec_heads=self.dec_heads,
            mlp_ratio=self.mlp_ratio,
        )

    def validate(self) -> None:
        try:
            self.schedule()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.pred_loss not in ("relative", "absolute", "none"):
            raise ConfigError(f"pred_loss must be relative, absolute or none, got {self.pred_loss!r}")
        if self.target not in ("pixel", "ema"):
            raise ConfigError(f"target must be pixel or ema, got {self.target!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ---------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        values = parse_key_values(text)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, kinds[key], raw)
        return cls(**kwargs)


def parse_key_values(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, kind, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw
