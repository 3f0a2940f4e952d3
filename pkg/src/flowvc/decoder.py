"""Prior fusion and the flow-matching mel decoder.

The fusion stage cross-attends quantized content frames (queries)
against frame-wise speaker features (keys/values) and projects the
result to mel dimensionality, producing the prior mean.  The decoder is
a transformer U-Net over mel frames whose attention layers also query
the speaker features; it regresses the constant-velocity field of the
optimal-transport path between noise and data, and generation runs an
explicit Euler loop over that field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, no_grad

__all__ = [
    "FlowConfig",
    "FusionConfig",
    "DecoderConfig",
    "Linear",
    "LayerNorm",
    "multihead_cross_attention",
    "PriorFusion",
    "prior_loss",
    "ot_flow_point",
    "ot_target_field",
    "layer_normalize",
    "saln_condition",
    "VectorFieldNet",
    "cfm_loss",
    "sample",
]

MEL_DIM = 80
LOG_TWO_PI = math.log(2.0 * math.pi)

CONDITION_MODES = ("cross-attention", "saln", "mean-add")


@dataclass
class FlowConfig:
    sigma_min: float = 1e-4
    steps: int = 10
    source: str = "standard"  # or "prior-mean"

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError(f"sigma_min {self.sigma_min} outside [0, 1)")
        if self.steps < 1:
            raise ValueError(f"need at least one sampling step, got {self.steps}")
        if self.source not in ("standard", "prior-mean"):
            raise ValueError(f"unknown flow source {self.source!r}")


@dataclass
class FusionConfig:
    attn_dim: int = 128
    heads: int = 2


@dataclass
class DecoderConfig:
    hidden: int = 128
    heads: int = 2
    levels: int = 2
    blocks_per_level: int = 2
    ffn_mult: int = 2
    condition: str = "cross-attention"

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden size must divide evenly over heads")
        if self.condition not in CONDITION_MODES:
            raise ValueError(
                f"condition {self.condition!r} not one of {CONDITION_MODES}"
            )


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


class Linear:
    def __init__(self, rng, d_in, d_out, dtype=np.float32, bias_init=0.0):
        self.weight = ad.randn(rng, (d_in, d_out), scale=1.0 / math.sqrt(d_in),
                               dtype=dtype, requires_grad=True)
        self.bias = Tensor(np.full(d_out, bias_init, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class LayerNorm:
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_normalize(x, self.eps) * self.gain + self.bias

    def named_parameters(self):
        return {"gain": self.gain, "bias": self.bias}


def layer_normalize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance per frame, variance floored at `eps`."""
    m = x.mean(axis=-1, keepdims=True)
    centered = x - m
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * ((var + eps) ** -0.5)


def saln_condition(features, scale, shift, eps: float = 1e-5) -> Tensor:
    """Style-adaptive normalization: normalize per frame, then apply an
    externally predicted scale and shift."""
    if not isinstance(features, Tensor):
        features = Tensor(features)
    return layer_normalize(features, eps) * scale + shift


def multihead_cross_attention(q, k, v, num_heads, probs_out: list | None = None):
    """Scaled dot-product attention, queries (T, D) against keys/values (S, D).

    Rows of the attention matrix are a softmax, so they sum to one.
    Appends per-head probabilities to `probs_out` when given.
    """
    frames, dim = q.shape
    source = k.shape[0]
    if dim % num_heads != 0:
        raise ShapeError(f"attention dim {dim} not divisible by {num_heads} heads")
    head_dim = dim // num_heads
    qh = q.reshape(frames, num_heads, head_dim).transpose(1, 0, 2)
    kh = k.reshape(source, num_heads, head_dim).transpose(1, 2, 0)
    vh = v.reshape(source, num_heads, head_dim).transpose(1, 0, 2)
    scores = (qh @ kh) * (1.0 / math.sqrt(head_dim))
    probs = ad.softmax(scores, axis=-1)
    if probs_out is not None:
        probs_out.append(probs.data)
    out = probs @ vh
    return out.transpose(1, 0, 2).reshape(frames, dim)


def _collect(prefix: str, obj) -> dict:
    out = {}
    for name, p in obj.named_parameters().items():
        out[f"{prefix}.{name}"] = p
    return out


# --------------------------------------------------------------------------
# prior fusion
# --------------------------------------------------------------------------


class PriorFusion:
    """Cross-attention of content queries over speaker keys/values,
    projected to mel dimensionality.  Output length always equals the
    content length."""

    def __init__(self, rng, content_dim, speaker_dim, config: FusionConfig | None = None,
                 mel_dim: int = MEL_DIM, dtype=np.float32):
        config = config or FusionConfig()
        self.config = config
        self.query = Linear(rng, content_dim, config.attn_dim, dtype)
        self.key = Linear(rng, speaker_dim, config.attn_dim, dtype)
        self.value = Linear(rng, speaker_dim, config.attn_dim, dtype)
        self.out = Linear(rng, config.attn_dim, mel_dim, dtype)

    def __call__(self, content: Tensor, speaker: Tensor,
                 probs_out: list | None = None) -> Tensor:
        if content.ndim != 2 or speaker.ndim != 2:
            raise ShapeError(
                f"fusion expects 2-D content and speaker features, got "
                f"{content.shape} and {speaker.shape}"
            )
        if content.shape[0] == 0 or speaker.shape[0] == 0:
            raise ShapeError("fusion inputs must be nonempty")
        attended = multihead_cross_attention(
            self.query(content), self.key(speaker), self.value(speaker),
            self.config.heads, probs_out,
        )
        return self.out(attended)

    def named_parameters(self):
        params = {}
        for name, sub in (("query", self.query), ("key", self.key),
                          ("value", self.value), ("out", self.out)):
            params.update(_collect(name, sub))
        return params


def prior_loss(prior_mean, mel) -> Tensor:
    """Negative Gaussian log-likelihood of the mel frames under an
    identity-covariance prior centered at `prior_mean`:

        sum_t [ (mel_dim / 2) ln(2 pi) + 0.5 ||mel_t - mean_t||^2 ]
    """
    if not isinstance(prior_mean, Tensor):
        prior_mean = Tensor(prior_mean)
    if not isinstance(mel, Tensor):
        mel = Tensor(mel)
    if prior_mean.shape != mel.shape or prior_mean.ndim != 2:
        raise ShapeError(
            f"prior loss shapes differ: {prior_mean.shape} vs {mel.shape}"
        )
    frames, dim = mel.shape
    residual = mel - prior_mean
    constant = frames * (dim / 2.0) * LOG_TWO_PI
    return (residual * residual).sum() * 0.5 + constant


# --------------------------------------------------------------------------
# optimal-transport path
# --------------------------------------------------------------------------


def _shapes_of(a):
    return a.shape if hasattr(a, "shape") else np.asarray(a).shape


def ot_flow_point(x0, x1, t: float, sigma_min: float):
    """Point on the straight conditioning path at time t in [0, 1]:
    (1 - (1 - sigma_min) t) x0 + t x1.  Endpoints are exact."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time {t} outside [0, 1]")
    if _shapes_of(x0) != _shapes_of(x1):
        raise ShapeError(f"path endpoints differ: {_shapes_of(x0)} vs {_shapes_of(x1)}")
    t = float(t)
    # 1 - (1 - s)t rewritten as 1 - t + s*t so both endpoints are exact
    return (1.0 - t + sigma_min * t) * x0 + t * x1


def ot_target_field(x0, x1, sigma_min: float):
    """Time derivative of `ot_flow_point`: x1 - (1 - sigma_min) x0."""
    if _shapes_of(x0) != _shapes_of(x1):
        raise ShapeError(f"field endpoints differ: {_shapes_of(x0)} vs {_shapes_of(x1)}")
    return x1 - (1.0 - sigma_min) * x0


# --------------------------------------------------------------------------
# vector field network
# --------------------------------------------------------------------------


def sinusoidal_time_embedding(t: float, dim: int, dtype=np.float32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    angles = float(t) * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if emb.size < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.size)])
    return emb.astype(dtype).reshape(1, dim)


class DecoderBlock:
    """One U-Net block: timestep injection, a speaker-conditioning
    sublayer (cross-attention by default, SALN or mean-add for the
    ablation variants), and a feed-forward sublayer."""

    def __init__(self, rng, hidden, heads, ffn_mult, condition, dtype=np.float32):
        self.heads = heads
        self.condition = condition
        self.time_proj = Linear(rng, hidden, hidden, dtype)
        if condition == "cross-attention":
            self.norm_attn = LayerNorm(hidden, dtype)
            self.q_proj = Linear(rng, hidden, hidden, dtype)
            self.out_proj = Linear(rng, hidden, hidden, dtype)
        elif condition == "saln":
            self.scale_proj = Linear(rng, hidden, hidden, dtype, bias_init=1.0)
            self.shift_proj = Linear(rng, hidden, hidden, dtype)
        else:  # mean-add
            self.add_proj = Linear(rng, hidden, hidden, dtype)
        self.norm_ffn = LayerNorm(hidden, dtype)
        self.ffn_in = Linear(rng, hidden, hidden * ffn_mult, dtype)
        self.ffn_out = Linear(rng, hidden * ffn_mult, hidden, dtype)

    def __call__(self, x, temb, spk_key, spk_value, spk_pooled,
                 probs_out: list | None = None):
        x = x + self.time_proj(temb)
        if self.condition == "cross-attention":
            attended = multihead_cross_attention(
                self.q_proj(self.norm_attn(x)), spk_key, spk_value,
                self.heads, probs_out,
            )
            x = x + self.out_proj(attended)
        elif self.condition == "saln":
            x = saln_condition(x, self.scale_proj(spk_pooled), self.shift_proj(spk_pooled))
        else:
            x = x + self.add_proj(spk_pooled)
        return x + self.ffn_out(ad.gelu(self.ffn_in(self.norm_ffn(x))))

    def named_parameters(self):
        params = _collect("time_proj", self.time_proj)
        if self.condition == "cross-attention":
            params.update(_collect("norm_attn", self.norm_attn))
            params.update(_collect("q_proj", self.q_proj))
            params.update(_collect("out_proj", self.out_proj))
        elif self.condition == "saln":
            params.update(_collect("scale_proj", self.scale_proj))
            params.update(_collect("shift_proj", self.shift_proj))
        else:
            params.update(_collect("add_proj", self.add_proj))
        params.update(_collect("norm_ffn", self.norm_ffn))
        params.update(_collect("ffn_in", self.ffn_in))
        params.update(_collect("ffn_out", self.ffn_out))
        return params


def _downsample(x: Tensor) -> Tensor:
    frames, dim = x.shape
    return x.reshape(frames // 2, 2, dim).mean(axis=1)


def _upsample(x: Tensor) -> Tensor:
    frames, dim = x.shape
    doubled = ad.concat([x.reshape(frames, 1, dim), x.reshape(frames, 1, dim)], axis=1)
    return doubled.reshape(frames * 2, dim)


class VectorFieldNet:
    """Transformer U-Net estimating the flow velocity.

    The noisy mel state is concatenated with the prior mean at the
    input; down-path activations are concatenated back on the up path
    (the skip-connected blocks), and every block sees the sinusoidal
    timestep embedding.  Speaker key/value projections are computed once
    per forward pass and shared by all attention blocks.
    """

    def __init__(self, rng, speaker_dim, config: DecoderConfig | None = None,
                 mel_dim: int = MEL_DIM, dtype=np.float32):
        config = config or DecoderConfig()
        self.config = config
        self.mel_dim = mel_dim
        self.dtype = dtype
        hidden = config.hidden
        self.in_proj = Linear(rng, 2 * mel_dim, hidden, dtype)
        self.time_in = Linear(rng, hidden, hidden, dtype)
        self.time_out = Linear(rng, hidden, hidden, dtype)
        self.spk_key = Linear(rng, speaker_dim, hidden, dtype)
        self.spk_value = Linear(rng, speaker_dim, hidden, dtype)
        self.spk_pool = Linear(rng, speaker_dim, hidden, dtype)

        def block():
            return DecoderBlock(rng, hidden, config.heads, config.ffn_mult,
                                config.condition, dtype)

        self.down_stages = [
            [block() for _ in range(config.blocks_per_level)]
            for _ in range(config.levels)
        ]
        self.merges = [Linear(rng, 2 * hidden, hidden, dtype)
                       for _ in range(config.levels - 1)]
        self.up_stages = [
            [block() for _ in range(config.blocks_per_level)]
            for _ in range(config.levels - 1)
        ]
        self.out_norm = LayerNorm(hidden, dtype)
        self.out_proj = Linear(rng, hidden, mel_dim, dtype)

    # -- parameters ------------------------------------------------------

    def named_parameters(self):
        params = {}
        for name, sub in (("in_proj", self.in_proj), ("time_in", self.time_in),
                          ("time_out", self.time_out), ("spk_key", self.spk_key),
                          ("spk_value", self.spk_value), ("spk_pool", self.spk_pool),
                          ("out_norm", self.out_norm), ("out_proj", self.out_proj)):
            params.update(_collect(name, sub))
        for level, stage in enumerate(self.down_stages):
            for i, blk in enumerate(stage):
                params.update(_collect(f"down.{level}.{i}", blk))
        for level, merge in enumerate(self.merges):
            params.update(_collect(f"merge.{level}", merge))
        for level, stage in enumerate(self.up_stages):
            for i, blk in enumerate(stage):
                params.update(_collect(f"up.{level}.{i}", blk))
        return params

    # -- forward -----------------------------------------------------------

    def __call__(self, noisy, t, prior_mean, speaker,
                 probs_out: list | None = None) -> Tensor:
        return self.vector_field(noisy, t, prior_mean, speaker, probs_out)

    def conditioning_cache(self, speaker, prior_mean=None) -> tuple:
        """Projections that stay constant across Euler steps: speaker
        keys/values/pool, and (when the prior is known up front) the
        prior's share of the input projection."""
        if not isinstance(speaker, Tensor):
            speaker = Tensor(np.asarray(speaker, dtype=self.dtype))
        prior_base = None
        if prior_mean is not None:
            if not isinstance(prior_mean, Tensor):
                prior_mean = Tensor(np.asarray(prior_mean, dtype=self.dtype))
            prior_base = self._prior_projection(prior_mean)
        return (
            self.spk_key(speaker),
            self.spk_value(speaker),
            self.spk_pool(speaker.mean(axis=0, keepdims=True)),
            prior_base,
        )

    def _prior_projection(self, prior_mean: Tensor) -> Tensor:
        return prior_mean @ self.in_proj.weight[self.mel_dim :] + self.in_proj.bias

    def sampling_field(self, speaker, prior_mean=None):
        """Field closure with all step-invariant conditioning precomputed."""
        with no_grad():
            cache = self.conditioning_cache(speaker, prior_mean)

        def field(noisy, t, prior, _speaker=None, probs_out=None):
            return self.vector_field(noisy, t, prior, speaker,
                                     probs_out=probs_out, cache=cache)

        return field

    def vector_field(self, noisy, t, prior_mean, speaker,
                     probs_out: list | None = None, cache: tuple | None = None) -> Tensor:
        if not isinstance(noisy, Tensor):
            noisy = Tensor(np.asarray(noisy, dtype=self.dtype))
        if not isinstance(prior_mean, Tensor):
            prior_mean = Tensor(np.asarray(prior_mean, dtype=self.dtype))
        if not isinstance(speaker, Tensor):
            speaker = Tensor(np.asarray(speaker, dtype=self.dtype))
        if noisy.shape != prior_mean.shape or noisy.ndim != 2:
            raise ShapeError(
                f"state/prior shapes differ: {noisy.shape} vs {prior_mean.shape}"
            )
        if not (np.all(np.isfinite(noisy.data)) and np.all(np.isfinite(prior_mean.data))
                and np.all(np.isfinite(speaker.data))):
            raise ValueError("vector field requires finite inputs")
        if not 0.0 <= float(t) <= 1.0:
            raise ValueError(f"flow time {t} outside [0, 1]")

        frames = noisy.shape[0]
        levels = self.config.levels
        multiple = max(4, 2 ** (levels - 1))

        if cache is None:
            cache = self.conditioning_cache(speaker, prior_mean)
        spk_key, spk_value, spk_pooled, prior_base = cache
        if prior_base is None:
            prior_base = self._prior_projection(prior_mean)
        h = noisy @ self.in_proj.weight[: self.mel_dim] + prior_base
        pad = (-frames) % multiple
        if pad:
            last = h[frames - 1 : frames]
            h = ad.concat([h] + [last] * pad, axis=0)

        temb = Tensor(sinusoidal_time_embedding(t, self.config.hidden, self.dtype))
        temb = self.time_out(ad.gelu(self.time_in(temb)))

        skips = []
        for level in range(levels):
            for blk in self.down_stages[level]:
                h = blk(h, temb, spk_key, spk_value, spk_pooled, probs_out)
            if level < levels - 1:
                skips.append(h)
                h = _downsample(h)
        for level in reversed(range(levels - 1)):
            h = _upsample(h)
            h = self.merges[level](ad.concat([h, skips[level]], axis=-1))
            for blk in self.up_stages[level]:
                h = blk(h, temb, spk_key, spk_value, spk_pooled, probs_out)

        out = self.out_proj(self.out_norm(h))
        if pad:
            out = out[0:frames]
        return out


# --------------------------------------------------------------------------
# training objective and sampling
# --------------------------------------------------------------------------


def _draw_source(rng, shape, prior_mean, flow: FlowConfig) -> np.ndarray:
    x0 = rng.standard_normal(shape)
    if flow.source == "prior-mean":
        base = prior_mean.data if isinstance(prior_mean, Tensor) else prior_mean
        x0 = x0 + base
    return x0


def cfm_loss(mel, prior_mean, speaker, rng: np.random.Generator,
             field=None, flow: FlowConfig | None = None) -> Tensor:
    """Flow-matching regression loss for one utterance.

    Draws t uniformly and a source sample, forms the path point and its
    constant target velocity, and returns the mean squared error of the
    estimated field.  `field` defaults to a `VectorFieldNet`-compatible
    callable and is injectable for oracle tests.
    """
    flow = flow or FlowConfig()
    mel = np.asarray(mel.data if isinstance(mel, Tensor) else mel, dtype=np.float64)
    t = float(rng.uniform())
    x0 = _draw_source(rng, mel.shape, prior_mean, flow)
    point = ot_flow_point(x0, mel, t, flow.sigma_min)
    target = ot_target_field(x0, mel, flow.sigma_min)
    estimate = field(point, t, prior_mean, speaker)
    if not isinstance(estimate, Tensor):
        estimate = Tensor(estimate)
    diff = estimate - Tensor(target.astype(estimate.dtype))
    return (diff * diff).mean()


def sample(prior_mean, speaker, flow: FlowConfig, rng: np.random.Generator,
           field=None) -> np.ndarray:
    """Euler integration of the field from t=0 to t=1.

    Starts at a source draw and takes `flow.steps` equal steps; returns
    the final state as a (frames, mel_dim) float32 array.
    """
    base = prior_mean.data if isinstance(prior_mean, Tensor) else np.asarray(prior_mean)
    x = _draw_source(rng, base.shape, prior_mean, flow)
    step = 1.0 / flow.steps
    with ad.no_grad():
        for k in range(flow.steps):
            velocity = field(x, k * step, prior_mean, speaker)
            if isinstance(velocity, Tensor):
                velocity = velocity.data
            x = x + step * velocity
    return x.astype(np.float32)
