"""The assembled voice-conversion model.

Content path: extractor -> content adapter -> vector quantizer.
Speaker path: extractor -> speaker adapter (frame-wise, or mean-pooled
for the mean-add conditioning variant).  The two meet in the prior
fusion, and the flow decoder turns the fused prior plus speaker frames
into a mel spectrogram.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, seed_stream
from .decoder import PriorFusion, VectorFieldNet, sample
from .dsp import AudioClip, mel_spectrogram
from .encoders import LayerAdapter, VectorQuantizer
from .extractor import LayeredFeatureExtractor

__all__ = ["VoiceConversionModel"]


class VoiceConversionModel:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        init_rng = seed_stream(config.seed, "init")
        num_layers = config.extractor.num_layers
        dim = config.extractor.dim

        self.extractor = LayeredFeatureExtractor(config.extractor, dtype=dtype)
        self.content_adapter = LayerAdapter(
            num_layers,
            fixed_layer=num_layers - 1 if config.no_adapter else None,
            dtype=dtype,
        )
        self.speaker_adapter = LayerAdapter(
            num_layers,
            fixed_layer=0 if config.no_adapter else None,
            dtype=dtype,
        )
        self.quantizer = VectorQuantizer(config.codebook_size, dim, init_rng, dtype=dtype)
        self.fusion = PriorFusion(init_rng, content_dim=dim, speaker_dim=dim,
                                  config=config.fusion, dtype=dtype)
        self.field = VectorFieldNet(init_rng, speaker_dim=dim, config=config.decoder,
                                    dtype=dtype)

    # -- encoding ----------------------------------------------------------

    def extract_features(self, clip: AudioClip) -> Tensor:
        return self.extractor.extract(clip)

    def encode_content(self, clip: AudioClip):
        """Quantized content features for a clip: (quantized, indices, continuous).

        With the no-VQ variant the continuous adapter output passes
        through unquantized and indices are None.
        """
        return self.encode_content_from_features(self.extract_features(clip))

    def encode_content_from_features(self, layer_features: Tensor):
        continuous = self.content_adapter.combine(layer_features)
        if self.config.no_vq:
            return continuous, None, continuous
        quantized, indices = self.quantizer.quantize(continuous)
        return quantized, indices, continuous

    def encode_speaker(self, clip: AudioClip) -> Tensor:
        return self.encode_speaker_from_features(self.extract_features(clip))

    def encode_speaker_from_features(self, layer_features: Tensor) -> Tensor:
        features = self.speaker_adapter.combine(layer_features)
        if self.config.condition == "mean-add":
            return features.mean(axis=0, keepdims=True)
        return features

    def fuse(self, content: Tensor, speaker: Tensor, probs_out=None) -> Tensor:
        return self.fusion(content, speaker, probs_out=probs_out)

    # -- inference -----------------------------------------------------------

    def convert(self, source: AudioClip, reference: AudioClip,
                rng: np.random.Generator, steps: int | None = None) -> np.ndarray:
        """Convert `source` content to `reference` timbre; returns a mel array."""
        flow = self.config.flow
        if steps is not None:
            flow = type(flow)(sigma_min=flow.sigma_min, steps=steps, source=flow.source)
        with ad.no_grad():
            content, _, _ = self.encode_content(source)
            speaker = self.encode_speaker(reference)
            prior_mean = self.fuse(content, speaker)
            return sample(prior_mean, speaker, flow, rng,
                          field=self.field.sampling_field(speaker, prior_mean))

    def reconstruct_mel(self, clip: AudioClip) -> np.ndarray:
        return mel_spectrogram(clip, self.config.mel)

    # -- parameters ------------------------------------------------------------

    def named_parameters(self) -> dict:
        params = {}
        params.update(self.extractor.named_parameters())
        params["content_adapter.logits"] = self.content_adapter.logits
        params["speaker_adapter.logits"] = self.speaker_adapter.logits
        params["quantizer.codebook"] = self.quantizer.codebook
        for name, p in self.fusion.named_parameters().items():
            params[f"fusion.{name}"] = p
        for name, p in self.field.named_parameters().items():
            params[f"decoder.{name}"] = p
        return params

    def trainable_parameters(self) -> dict:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def parameter_groups(self) -> dict:
        """Logical parameter groups for gradient-flow audits."""
        groups = {
            "content_adapter": {"content_adapter.logits"},
            "speaker_adapter": {"speaker_adapter.logits"},
            "codebook": {"quantizer.codebook"},
            "fusion": set(),
            "decoder": set(),
        }
        for name in self.named_parameters():
            if name.startswith("fusion."):
                groups["fusion"].add(name)
            elif name.startswith("decoder."):
                groups["decoder"].add(name)
        return groups
