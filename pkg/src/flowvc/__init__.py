"""Desk-scale voice conversion with adapter-weighted layered speech
features, a vector-quantized content bottleneck, and a flow-matching
mel-spectrogram decoder conditioned on frame-wise speaker features."""

__version__ = "0.1.0"
