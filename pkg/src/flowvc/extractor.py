"""Deterministic layered feature extractor over raw waveforms.

Stands in for a pretrained self-supervised speech stack: a strided
convolutional front end with total stride 320 (one output frame per mel
hop) followed by a pile of residual blocks whose outputs are all
recorded.  Early layers stay close to the raw acoustics, later layers
mix increasingly transformed detail, so the layer-weighting adapters
downstream have a real choice to make.  Randomly initialized from a
seed and frozen by default; a config flag enables joint fine-tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import AudioClip

__all__ = ["ExtractorConfig", "LayeredFeatureExtractor"]


@dataclass
class ExtractorConfig:
    num_layers: int = 12
    dim: int = 64
    strides: tuple = (5, 4, 4, 2, 2)
    channels: tuple = (24, 32, 48, 64)
    seed: int = 0
    trainable: bool = False

    def __post_init__(self):
        self.strides = tuple(self.strides)
        self.channels = tuple(self.channels)
        if len(self.channels) != len(self.strides) - 1:
            raise ValueError("need one channel width per intermediate stage")
        if self.num_layers < 1 or self.dim < 1:
            raise ValueError("num_layers and dim must be positive")

    @property
    def stride_product(self) -> int:
        return int(np.prod(self.strides))


class LayeredFeatureExtractor:
    def __init__(self, config: ExtractorConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)
        widths = (1,) + config.channels + (config.dim,)
        self.frontend = []
        for i, stride in enumerate(config.strides):
            fan_in = stride * widths[i]
            w = ad.randn(rng, (fan_in, widths[i + 1]), scale=1.0 / math.sqrt(fan_in),
                         dtype=dtype, requires_grad=config.trainable)
            b = ad.randn(rng, (widths[i + 1],), scale=0.1, dtype=dtype,
                         requires_grad=config.trainable)
            self.frontend.append((w, b))
        self.blocks = []
        dim = config.dim
        for _ in range(config.num_layers):
            w = ad.randn(rng, (dim, dim), scale=1.0 / math.sqrt(dim), dtype=dtype,
                         requires_grad=config.trainable)
            b = ad.randn(rng, (dim,), scale=0.1, dtype=dtype,
                         requires_grad=config.trainable)
            # depthwise kernel over (previous, current, next) frame
            k = ad.randn(rng, (3, dim), scale=1.0 / math.sqrt(3), dtype=dtype,
                         requires_grad=config.trainable)
            self.blocks.append((w, b, k))

    def named_parameters(self) -> dict:
        params = {}
        for i, (w, b) in enumerate(self.frontend):
            params[f"extractor.frontend.{i}.weight"] = w
            params[f"extractor.frontend.{i}.bias"] = b
        for i, (w, b, k) in enumerate(self.blocks):
            params[f"extractor.block.{i}.weight"] = w
            params[f"extractor.block.{i}.bias"] = b
            params[f"extractor.block.{i}.kernel"] = k
        return params

    def _forward(self, samples: np.ndarray) -> Tensor:
        x = Tensor(samples.reshape(-1, 1).astype(self.dtype))
        for (w, b), stride in zip(self.frontend, self.config.strides):
            frames = x.shape[0] // stride
            x = x[: frames * stride].reshape(frames, stride * x.shape[1])
            x = ad.tanh(x @ w + b)
        layers = []
        for w, b, k in self.blocks:
            u = ad.gelu(x @ w + b)
            padded = ad.concat([u[0:1], u, u[-1:]], axis=0)
            frames = u.shape[0]
            conv = (
                padded[0:frames] * k[0]
                + padded[1 : frames + 1] * k[1]
                + padded[2 : frames + 2] * k[2]
            )
            x = x + conv
            layers.append(x.reshape(1, frames, self.config.dim))
        return ad.concat(layers, axis=0)

    def extract(self, clip: AudioClip) -> Tensor:
        """All block outputs stacked as (num_layers, frames, dim).

        Frames align one-to-one with mel frames of the same clip:
        frames = floor(num_samples / stride_product).
        """
        stride = self.config.stride_product
        if clip.samples.size < stride:
            raise ValueError(
                f"clip of {clip.samples.size} samples is shorter than one "
                f"analysis frame ({stride})"
            )
        if self.config.trainable:
            return self._forward(clip.samples)
        with ad.no_grad():
            return self._forward(clip.samples)
