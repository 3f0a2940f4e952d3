"""Training loop: composite objective, optimizer, and loss logging.

Training is pure reconstruction: each batch item uses the same
utterance as source and reference, so the commitment, prior, and
flow-matching terms all pull toward reproducing the original mel.
Conversion pairs only appear at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig, seed_stream
from .decoder import cfm_loss, prior_loss, saln_condition
from .dsp import mel_spectrogram
from .encoders import commitment_loss
from .model import VoiceConversionModel

__all__ = [
    "TrainingDiverged",
    "Adam",
    "PreparedUtterance",
    "prepare_corpus",
    "compute_losses",
    "model_total_loss",
    "train",
    "write_loss_csv",
    "saln_condition",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class Adam:
    """Adaptive-moment optimizer with global gradient-norm clipping."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 grad_clip: float | None = 1.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        grads = {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in self.params.items()
        }
        if self.grad_clip is not None:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for k, p in self.params.items():
            g = grads[k]
            self._m[k] = self.beta1 * self._m[k] + (1.0 - self.beta1) * g
            self._v[k] = self.beta2 * self._v[k] + (1.0 - self.beta2) * g * g
            m_hat = self._m[k] / b1c
            v_hat = self._v[k] / b2c
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype
            )


@dataclass
class PreparedUtterance:
    mel: np.ndarray
    layer_features: np.ndarray | None  # cached when the extractor is frozen
    clip: object
    speaker_id: int = -1
    script_id: int = -1


def prepare_corpus(model: VoiceConversionModel, items) -> list:
    """Precompute mels and (for a frozen extractor) layer features."""
    prepared = []
    frozen = not model.config.extractor.trainable
    for item in items:
        clip = item.clip if hasattr(item, "clip") else item
        feats = model.extract_features(clip).data if frozen else None
        prepared.append(
            PreparedUtterance(
                mel=mel_spectrogram(clip, model.config.mel),
                layer_features=feats,
                clip=clip,
                speaker_id=getattr(item, "speaker_id", -1),
                script_id=getattr(item, "script_id", -1),
            )
        )
    return prepared


def compute_losses(mel, continuous, selected, prior_mean, speaker, rng, field,
                   flow, coeffs=(1.0, 1.0, 1.0), include_commit=True):
    """Assemble the three objective terms from prepared pieces.

    Returns (total tensor, breakdown dict).  `selected` and the
    commitment term are skipped when `include_commit` is false (the
    no-VQ variant).  Injectable `field` keeps this testable against
    oracle stubs.
    """
    commit_c, prior_c, dec_c = coeffs
    terms = {}
    if include_commit:
        commit = commitment_loss(continuous, selected)
        terms["commit"] = commit.item()
        total = commit * commit_c
    else:
        terms["commit"] = 0.0
        total = None
    prior = prior_loss(prior_mean, mel)
    terms["prior"] = prior.item()
    total = prior * prior_c if total is None else total + prior * prior_c
    dec = cfm_loss(mel, prior_mean, speaker, rng, field=field, flow=flow)
    terms["dec"] = dec.item()
    total = total + dec * dec_c
    terms["total"] = total.item()
    return total, terms


def model_total_loss(model: VoiceConversionModel, batch, rng,
                     config: TrainConfig | None = None):
    """Average the objective over a batch of prepared utterances.

    Returns (total tensor, breakdown dict, used codebook indices,
    continuous-frame pool for dead-code reseeding).
    """
    config = config or TrainConfig()
    coeffs = (config.commit_coeff, config.prior_coeff, config.dec_coeff)
    totals = []
    sums = {"commit": 0.0, "prior": 0.0, "dec": 0.0, "total": 0.0}
    used = []
    pool = []
    for item in batch:
        if item.layer_features is not None:
            feats = Tensor(item.layer_features)
        else:
            feats = model.extract_features(item.clip)
        quantized, indices, continuous = model.encode_content_from_features(feats)
        speaker = model.encode_speaker_from_features(feats)
        prior_mean = model.fuse(quantized, speaker)
        include_commit = not model.config.no_vq
        selected = (
            model.quantizer.selected_entries(indices) if include_commit else None
        )
        total, terms = compute_losses(
            item.mel, continuous, selected, prior_mean, speaker, rng,
            field=model.field.vector_field, flow=model.config.flow,
            coeffs=coeffs, include_commit=include_commit,
        )
        totals.append(total)
        for key in sums:
            sums[key] += terms[key]
        if indices is not None:
            used.append(indices)
            pool.append(continuous.data)
    batch_total = totals[0]
    for t in totals[1:]:
        batch_total = batch_total + t
    batch_total = batch_total * (1.0 / len(batch))
    breakdown = {k: v / len(batch) for k, v in sums.items()}
    used_idx = np.concatenate(used) if used else np.zeros(0, dtype=np.int64)
    pool_arr = np.concatenate(pool, axis=0) if pool else np.zeros((0, 1))
    return batch_total, breakdown, used_idx, pool_arr


def train(model: VoiceConversionModel, corpus, config: TrainConfig):
    """Run the reconstruction loop; returns (history, final_rng_state).

    History rows are (step, total, commit, prior, dec).  Raises
    TrainingDiverged with the offending step on a non-finite loss.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    rng = seed_stream(config.seed, "training")
    prepared = corpus if isinstance(corpus[0], PreparedUtterance) else prepare_corpus(model, corpus)
    optimizer = Adam(model.trainable_parameters(), lr=config.learning_rate,
                     grad_clip=config.grad_clip)
    history = []
    for step in range(config.steps):
        picks = rng.integers(0, len(prepared), size=config.batch_size)
        batch = [prepared[i] for i in picks]
        optimizer.zero_grad()
        try:
            total, breakdown, used, pool = model_total_loss(model, batch, rng, config)
        except ValueError as err:
            if "finite" in str(err):
                raise TrainingDiverged(step, float("nan")) from err
            raise
        if not np.isfinite(breakdown["total"]):
            raise TrainingDiverged(step, breakdown["total"])
        total.backward()
        optimizer.step()
        if not model.config.no_vq:
            model.quantizer.note_usage(used)
            model.quantizer.reseed_stale(config.dead_code_steps, pool, rng)
        history.append(
            (step, breakdown["total"], breakdown["commit"], breakdown["prior"],
             breakdown["dec"])
        )
    return history, rng.bit_generator.state


def write_loss_csv(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("step,total,commit,prior,dec\n")
        for step, total, commit, prior, dec in history:
            fh.write(f"{step},{total:.8e},{commit:.8e},{prior:.8e},{dec:.8e}\n")
