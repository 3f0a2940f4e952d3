"""Layer-weighting adapters and the vector-quantized content bottleneck.

The adapter is a bias-free set of per-layer logits pushed through a
softmax, so the combined representation is a convex mixture of the
extractor's layer outputs.  The content branch additionally snaps each
frame to its nearest codebook entry; gradients pass straight through
the quantizer to the continuous features, while the codebook itself
learns only from downstream use of the selected entries.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

__all__ = [
    "LayerAdapter",
    "adapter_combine",
    "VectorQuantizer",
    "commitment_loss",
]


class LayerAdapter:
    """Learnable softmax weights over extractor layers.

    With `fixed_layer` set, the adapter is replaced by a frozen one-hot
    selection of that layer and owns no trainable state.
    """

    def __init__(self, num_layers: int, fixed_layer: int | None = None, dtype=np.float32):
        self.num_layers = num_layers
        self.fixed_layer = fixed_layer
        if fixed_layer is None:
            self.logits = ad.zeros((num_layers,), dtype=dtype, requires_grad=True)
        else:
            if not 0 <= fixed_layer < num_layers:
                raise ValueError(f"fixed layer {fixed_layer} out of range")
            onehot = np.zeros(num_layers, dtype=dtype)
            onehot[fixed_layer] = 1.0
            self.logits = Tensor(onehot)  # constant, receives no gradient

    def weights(self) -> Tensor:
        if self.fixed_layer is not None:
            return self.logits
        return ad.softmax(self.logits, axis=-1)

    def combine(self, layer_features: Tensor) -> Tensor:
        return adapter_combine(layer_features, self.weights())

    def named_parameters(self) -> dict:
        return {"logits": self.logits}

    def trainable_parameters(self) -> dict:
        return {} if self.fixed_layer is not None else {"logits": self.logits}


def adapter_combine(layer_features, weights) -> Tensor:
    """Weighted sum over the layer axis: out[t, d] = sum_l w[l] * f[l, t, d]."""
    if not isinstance(layer_features, Tensor):
        layer_features = Tensor(layer_features)
    if not isinstance(weights, Tensor):
        weights = Tensor(weights)
    if layer_features.ndim != 3 or weights.ndim != 1:
        raise ShapeError(
            f"expected (layers, frames, dim) features and 1-D weights, got "
            f"{layer_features.shape} and {weights.shape}"
        )
    if weights.shape[0] != layer_features.shape[0]:
        raise ShapeError(
            f"weight length {weights.shape[0]} does not match layer count "
            f"{layer_features.shape[0]}"
        )
    num_layers = weights.shape[0]
    return (weights.reshape(num_layers, 1, 1) * layer_features).sum(axis=0)


class VectorQuantizer:
    """Nearest-neighbor codebook with straight-through gradients.

    Ties break to the lowest entry index.  `usage` counts consecutive
    steps each entry has gone unselected; the trainer reseeds entries
    whose count crosses its staleness threshold.
    """

    def __init__(self, num_entries: int, dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        if num_entries < 1:
            raise ValueError("codebook needs at least one entry")
        self.codebook = ad.randn(rng, (num_entries, dim), scale=1.0 / math.sqrt(dim),
                                 dtype=dtype, requires_grad=True)
        self.unused_steps = np.zeros(num_entries, dtype=np.int64)

    @property
    def num_entries(self) -> int:
        return self.codebook.shape[0]

    def nearest_indices(self, features: np.ndarray) -> np.ndarray:
        """Index of the closest entry (squared Euclidean) per frame."""
        if self.codebook.size == 0:
            raise ValueError("empty codebook")
        diffs = features[:, None, :] - self.codebook.data[None, :, :]
        return np.argmin((diffs * diffs).sum(axis=-1), axis=1)

    def quantize(self, features: Tensor):
        """Snap frames to codebook entries.

        Returns (quantized, indices).  The quantized tensor's value is
        the selected entries; its gradient w.r.t. `features` is the
        identity map (straight-through), and the codebook receives the
        same downstream gradient through the entry values.
        """
        if features.ndim != 2 or features.shape[1] != self.codebook.shape[1]:
            raise ShapeError(
                f"expected (frames, {self.codebook.shape[1]}) features, got "
                f"{features.shape}"
            )
        idx = self.nearest_indices(features.data)
        selected = ad.gather_rows(self.codebook, idx)
        quantized = selected + (features - ad.stop_gradient(features))
        return quantized, idx

    def selected_entries(self, indices) -> Tensor:
        return ad.gather_rows(self.codebook, np.asarray(indices, dtype=np.int64))

    def note_usage(self, indices) -> None:
        hit = np.zeros(self.num_entries, dtype=bool)
        hit[np.asarray(indices, dtype=np.int64)] = True
        self.unused_steps[hit] = 0
        self.unused_steps[~hit] += 1

    def reseed_stale(self, threshold: int, pool: np.ndarray,
                     rng: np.random.Generator) -> int:
        """Replace entries unused for `threshold` steps with rows from `pool`."""
        stale = np.flatnonzero(self.unused_steps >= threshold)
        if stale.size == 0 or pool.shape[0] == 0:
            return 0
        picks = rng.integers(0, pool.shape[0], size=stale.size)
        self.codebook.data[stale] = pool[picks].astype(self.codebook.dtype)
        self.unused_steps[stale] = 0
        return int(stale.size)

    def named_parameters(self) -> dict:
        return {"codebook": self.codebook}


def commitment_loss(continuous: Tensor, selected: Tensor) -> Tensor:
    """Mean squared pull of encoder output toward its (frozen) entries.

    The selected entries are gradient-stopped: this term moves only the
    continuous features, never the codebook.
    """
    if continuous.shape != selected.shape:
        raise ShapeError(
            f"commitment loss shapes differ: {continuous.shape} vs {selected.shape}"
        )
    diff = continuous - ad.stop_gradient(selected)
    return (diff * diff).mean()
