"""Typed configuration records and the INI-style run configuration file."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigurationError

ADAPTER_KINDS = ("adaptformer", "lora", "serial_adapter")
PROMPT_KINDS = ("mask", "point", "box", "scribble")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    # None means "the last two blocks"
    adapted_layer_indices: Optional[tuple[int, ...]] = None
    memory_layers: int = 2
    decoder_blocks: int = 2

    def __post_init__(self):
        if self.adapted_layer_indices is not None:
            object.__setattr__(self, "adapted_layer_indices", tuple(sorted(set(self.adapted_layer_indices))))
        self.validate()

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size**2

    @property
    def adapted_layers(self) -> tuple[int, ...]:
        if self.adapted_layer_indices is None:
            return tuple(range(max(0, self.num_blocks - 2), self.num_blocks))
        return self.adapted_layer_indices

    def validate(self) -> None:
        positive = ("image_size", "patch_size", "embed_dim", "num_blocks", "num_heads", "mlp_ratio",
                    "memory_layers", "decoder_blocks")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.patch_size & (self.patch_size - 1):
            # the mask downsampler is a stack of stride-2 convolutions
            raise ConfigurationError(f"patch_size must be a power of two, got {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.embed_dim % 2:
            raise ConfigurationError(f"embed_dim must be even, got {self.embed_dim}")
        for i in self.adapted_layers:
            if not 0 <= i < self.num_blocks:
                raise ConfigurationError(f"adapted layer {i} outside [0, {self.num_blocks})")

    def fingerprint(self) -> str:
        payload = json.dumps(dataclasses.asdict(self) | {"adapted_layer_indices": list(self.adapted_layers)},
                             sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AdapterConfig:
    kind: str = "adaptformer"
    bottleneck_dim: Optional[int] = None  # None -> embed_dim // 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise ConfigurationError(f"unknown adapter kind {self.kind!r}; expected one of {ADAPTER_KINDS}")
        if self.bottleneck_dim is not None and self.bottleneck_dim <= 0:
            raise ConfigurationError("bottleneck_dim must be positive")

    def resolved_dim(self, embed_dim: int) -> int:
        return self.bottleneck_dim if self.bottleneck_dim is not None else embed_dim // 2


@dataclass(frozen=True)
class BaseConfig:
    """Settings of the class-agnostic tracking pretraining that produces the frozen base."""

    seed: int = 0
    steps: int = 800
    batch_size: int = 8
    learning_rate: float = 2e-3
    clip_frames: int = 2

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.learning_rate <= 0 or self.clip_frames < 2:
            raise ConfigurationError(f"invalid base pretraining settings: {self}")


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-4
    epochs: int = 5
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    clip_targets: int = 2  # J
    batch_size: int = 8
    seed: int = 0
    detach_pseudo_masks: bool = True
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs <= 0:
            raise ConfigurationError("epochs must be positive")
        if self.clip_targets <= 0:
            raise ConfigurationError("clip_targets (J) must be positive")
        if self.batch_size <= 0:
            raise ConfigurationError("batch_size must be positive")
        if self.lambda_bce < 0 or self.lambda_dice < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigurationError("max_steps must be positive when set")


@dataclass(frozen=True)
class DataConfig:
    n_folds: int = 3
    episodes_per_class: int = 4
    samples_per_episode: int = 8
    distractors: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_folds <= 0:
            raise ConfigurationError("n_folds must be positive")
        if self.episodes_per_class <= 0 or self.samples_per_episode <= 1:
            raise ConfigurationError("need at least one episode per class and two samples per episode")


@dataclass(frozen=True)
class EvalConfig:
    shots: int = 1
    prompt: str = "mask"
    episodes_per_class: int = 4
    targets_per_episode: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.shots < 1:
            raise ConfigurationError("shots must be >= 1")
        if self.prompt not in PROMPT_KINDS:
            raise ConfigurationError(f"unknown prompt kind {self.prompt!r}")
        if self.episodes_per_class <= 0 or self.targets_per_episode <= 0:
            raise ConfigurationError("episodes_per_class and targets_per_episode must be positive")


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        d = self.encoder.embed_dim
        if self.adapters.resolved_dim(d) >= d:
            raise ConfigurationError(
                f"adapter bottleneck {self.adapters.resolved_dim(d)} must be smaller than embed_dim {d}")


_SECTIONS = {
    "encoder": EncoderConfig,
    "base": BaseConfig,
    "adapters": AdapterConfig,
    "trainer": TrainerConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def _coerce(raw: str, annotation: str, key: str) -> Any:
    raw = raw.strip()
    if raw.lower() in ("none", "") and "Optional" in annotation:
        return None
    try:
        if "tuple" in annotation:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if "bool" in annotation:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in annotation:
            return int(raw)
        if "float" in annotation:
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"cannot parse {key} = {raw!r} as {annotation}") from None
    return raw


def load_run_config(path: str | Path | None) -> RunConfig:
    """Parse an INI-style run configuration; missing keys keep their defaults."""
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc

    sections: dict[str, Any] = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{name}]")
        cls = _SECTIONS[name]
        known = {f.name: str(f.type) for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigurationError(f"unknown key {key!r} in section [{name}]")
            kwargs[key] = _coerce(raw, known[key], f"{name}.{key}")
        sections[name] = cls(**kwargs)
    cfg = RunConfig(**sections)
    cfg.validate()
    return cfg


def dump_run_config(cfg: RunConfig) -> str:
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            if isinstance(value, (tuple, list)):
                value = " ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
