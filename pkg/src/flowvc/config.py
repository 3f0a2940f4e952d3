"""Configuration dataclasses, JSON round-tripping, and seeded RNG streams.

All randomness in the package flows from a single root seed split into
named streams (corpus, init, training, sampling, ...), so any pipeline
stage can be reproduced in isolation.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field

import numpy as np

from .decoder import DecoderConfig, FlowConfig, FusionConfig
from .dsp import MelConfig
from .extractor import ExtractorConfig

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "config_to_dict",
    "config_from_dict",
    "seed_stream",
]

CONDITION_CHOICES = ("cross-attention", "saln", "mean-add")


@dataclass
class ModelConfig:
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    codebook_size: int = 512
    no_vq: bool = False
    no_adapter: bool = False
    condition: str = "cross-attention"
    seed: int = 0

    def __post_init__(self):
        if self.condition not in CONDITION_CHOICES:
            raise ValueError(f"condition must be one of {CONDITION_CHOICES}")
        if self.codebook_size < 1:
            raise ValueError("codebook_size must be positive")
        if self.extractor.stride_product != self.mel.hop:
            raise ValueError(
                f"extractor stride product {self.extractor.stride_product} must "
                f"equal mel hop {self.mel.hop} so frames align"
            )
        self.decoder.condition = self.condition


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    steps: int = 500
    seed: int = 0
    commit_coeff: float = 1.0
    prior_coeff: float = 1.0
    dec_coeff: float = 1.0
    grad_clip: float = 1.0
    dead_code_steps: int = 500
    no_vq: bool = False
    no_adapter: bool = False
    condition: str = "cross-attention"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 1:
            raise ValueError("learning rate, batch size, and steps must be positive")
        if self.condition not in CONDITION_CHOICES:
            raise ValueError(f"condition must be one of {CONDITION_CHOICES}")


def config_to_dict(cfg) -> dict:
    """Recursively convert a config dataclass to plain JSON-friendly types."""
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = config_to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def config_from_dict(cls, data: dict):
    """Rebuild a config dataclass, rejecting unknown keys."""
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(field_map))
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = field_map[name]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, type) and dataclasses.is_dataclass(f.type)
        ):
            kwargs[name] = config_from_dict(f.type, value)
        elif isinstance(value, dict):
            # nested dataclass declared via string annotation
            nested = _NESTED_TYPES.get(name)
            if nested is None:
                raise ValueError(f"unexpected nested config {name!r}")
            kwargs[name] = config_from_dict(nested, value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED_TYPES = {
    "extractor": ExtractorConfig,
    "mel": MelConfig,
    "fusion": FusionConfig,
    "decoder": DecoderConfig,
    "flow": FlowConfig,
}


def seed_stream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stream under one root seed."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), tag]))
