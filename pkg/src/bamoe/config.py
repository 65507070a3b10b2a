"""Configuration records and their (de)serialisation.

Config files are TOML with one table per record::

    [encoder]
    num_layers = 2
    [weights]
    lambda_c = 0.1
    [ablation]
    use_bat = false
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError
from .vocab import Vocab


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    d_model: int = 16
    d_ff: int = 32
    num_heads: int = 2
    d_adapter: int = 8
    eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("encoder num_layers must be >= 1")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.d_adapter < 1:
            raise ConfigError("d_adapter must be >= 1")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 2
    d_model: int = 16
    d_ff: int = 32
    num_heads: int = 2

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("decoder num_layers must be >= 1")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")


@dataclass(frozen=True)
class BoundaryConfig:
    d_a: int = 16
    d_r: int = 8

    def __post_init__(self) -> None:
        if self.d_a < 1 or self.d_r < 1:
            raise ConfigError("d_a and d_r must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 0.7
    lambda_ctc: float = 0.3
    lambda_c: float = 0.1
    lambda_b: float = 0.1

    def __post_init__(self) -> None:
        if min(self.lambda_ce, self.lambda_ctc, self.lambda_c, self.lambda_b) < 0:
            raise ConfigError("loss weights must be non-negative")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(*(factor * w for w in dataclasses.astuple(self)))


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    boundary: BoundaryConfig = field(default_factory=BoundaryConfig)
    n_cn: int = 20
    n_en: int = 20
    use_moe_adapter: bool = True
    use_cla: bool = True
    use_bat: bool = True

    def __post_init__(self) -> None:
        if self.decoder.d_model != self.encoder.d_model:
            raise ConfigError("decoder d_model must equal encoder d_model")
        if self.use_cla and not self.use_moe_adapter:
            raise ConfigError("use_cla requires use_moe_adapter (CLA scores adapter outputs)")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_cn, self.n_en)


@dataclass(frozen=True)
class OptimConfig:
    """Optimizer and schedule.  The learning rate ramps linearly over
    ``warmup_steps`` and then stays flat or follows a cosine to zero."""

    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0
    steps: int = 1000
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 0
    optimizer: str = "sgd"
    beta2: float = 0.999
    warmup_steps: int = 0
    decay: str = "none"

    def __post_init__(self) -> None:
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r} (sgd or adam)")
        if self.decay not in ("none", "cosine"):
            raise ConfigError(f"unknown decay {self.decay!r} (none or cosine)")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.lr <= 0 or self.steps < 0 or self.batch_size < 1:
            raise ConfigError("lr must be > 0, steps >= 0, batch_size >= 1")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``."""
        if self.warmup_steps and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        if self.decay == "cosine":
            span = max(1, self.steps - self.warmup_steps)
            frac = min(1.0, (step - self.warmup_steps) / span)
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * frac))
        return self.lr


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def with_flags(self, use_moe_adapter: bool, use_cla: bool, use_bat: bool) -> "TrainConfig":
        model = dataclasses.replace(
            self.model, use_moe_adapter=use_moe_adapter, use_cla=use_cla, use_bat=use_bat
        )
        return dataclasses.replace(self, model=model)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        m = dict(raw.get("model", {}))
        try:
            model = ModelConfig(
                encoder=EncoderConfig(**m.pop("encoder", {})),
                decoder=DecoderConfig(**m.pop("decoder", {})),
                boundary=BoundaryConfig(**m.pop("boundary", {})),
                **m,
            )
            return cls(
                model=model,
                weights=LossWeights(**raw.get("weights", {})),
                optim=OptimConfig(**raw.get("optim", {})),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc


def load_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def train_config_from_toml(raw: dict) -> TrainConfig:
    """Flatten the user-facing TOML tables into a :class:`TrainConfig`."""
    model = dict(raw.get("model", {}))
    for key in ("encoder", "decoder", "boundary"):
        if key in raw:
            model[key] = raw[key]
    model.update(raw.get("ablation", {}))
    return TrainConfig.from_dict(
        {"model": model, "weights": raw.get("weights", {}), "optim": raw.get("optim", {})}
    )
