"""Evaluation harness: timing, speaker similarity, and adapter reports.

The speaker embedding is deliberately fixed (never trained): per-mel-bin
statistics plus pitch statistics from autocorrelation tracking, pushed
through a seeded random projection.  That keeps every similarity score
independent of the model under test.
"""

from __future__ import annotations

import csv
import gc
import time

import numpy as np

from . import autodiff as ad
from .decoder import FlowConfig, sample
from .dsp import AudioClip, MelConfig, griffin_lim, mel_spectrogram, resample

__all__ = [
    "rtf",
    "pitch_statistics",
    "speaker_embedding",
    "cosine_similarity",
    "disentanglement_score",
    "reconstruction_mse",
    "adapter_weights",
    "ascii_bar_chart",
    "write_adapter_report",
    "build_eval_report",
]

EMBED_DIM = 32
EMBED_SEED = 1337


# --------------------------------------------------------------------------
# timing
# --------------------------------------------------------------------------


def rtf(model, clip: AudioClip, steps: int, runs: int = 5,
        rng: np.random.Generator | None = None) -> dict:
    """Decoder real-time factor: decoder wall time / audio duration.

    The timed region is the decoder path of one conversion - prior
    fusion, conditioning projections, and the Euler loop - with
    encoding and Griffin-Lim excluded.  Each timed window covers a
    comparable amount of field work regardless of `steps` (short
    samplers are repeated within the window), so allocator and
    scheduler noise hits every step count evenly.  Runs one warm-up
    plus `runs` timed windows and reports the median; a coefficient of
    variation above 0.3 flags the measurement as noisy.
    """
    if clip.samples.size == 0 or clip.duration <= 0:
        raise ValueError("cannot time a zero-length clip")
    if runs < 1:
        raise ValueError("need at least one timed run")
    rng = rng or np.random.default_rng(0)
    with ad.no_grad():
        content, _, _ = model.encode_content(clip)
        speaker = model.encode_speaker(clip)
    flow = FlowConfig(sigma_min=model.config.flow.sigma_min, steps=steps,
                      source=model.config.flow.source)
    repeats = max(1, -(-10 // steps))  # ceil: >= 10 field evals per window
    durations = []
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()  # collector pauses would swamp millisecond-scale timings
    try:
        for i in range(runs + 1):
            start = time.perf_counter()
            for _ in range(repeats):
                with ad.no_grad():
                    prior_mean = model.fuse(content, speaker).detach()
                    field = model.field.sampling_field(speaker, prior_mean)
                sample(prior_mean, speaker, flow, rng, field=field)
            elapsed = (time.perf_counter() - start) / repeats
            if i > 0:  # discard the warm-up
                durations.append(elapsed)
    finally:
        if gc_was_enabled:
            gc.enable()
    durations = np.asarray(durations)
    median = float(np.median(durations))
    cv = float(durations.std() / durations.mean()) if durations.mean() > 0 else 0.0
    return {
        "rtf": median / clip.duration,
        "seconds": median,
        "cv": cv,
        "noisy": cv >= 0.3,
    }


# --------------------------------------------------------------------------
# speaker embedding
# --------------------------------------------------------------------------


def pitch_statistics(samples: np.ndarray, rate: int = 16000,
                     fmin: float = 60.0, fmax: float = 400.0):
    """Frame-wise autocorrelation pitch track summarized to statistics.

    Returns (stats, voiced) where stats = [mean ln f0, std ln f0,
    voiced fraction, ln f0 range]; all zeros when nothing is voiced.
    """
    frame = int(0.04 * rate)
    hop = int(0.02 * rate)
    lag_min = int(rate / fmax)
    lag_max = min(int(rate / fmin), frame - 1)
    values = []
    voiced_flags = []
    for start in range(0, samples.size - frame + 1, hop):
        seg = samples[start : start + frame].astype(np.float64)
        seg = seg - seg.mean()
        energy = float((seg * seg).sum())
        if energy < 1e-8:
            voiced_flags.append(False)
            continue
        spec = np.fft.rfft(seg, n=2 * frame)
        auto = np.fft.irfft(spec * np.conj(spec))[:frame]
        auto /= auto[0]
        window = auto[lag_min : lag_max + 1]
        best = int(np.argmax(window))
        if window[best] > 0.5:
            values.append(rate / (lag_min + best))
            voiced_flags.append(True)
        else:
            voiced_flags.append(False)
    if not values:
        return np.zeros(4), False
    log_f0 = np.log(np.asarray(values))
    voiced_fraction = float(np.mean(voiced_flags)) if voiced_flags else 0.0
    stats = np.array([
        float(log_f0.mean()),
        float(log_f0.std()),
        voiced_fraction,
        float(log_f0.max() - log_f0.min()),
    ])
    return stats, True


_PROJECTION = None


def _projection_matrix(feature_dim: int) -> np.ndarray:
    global _PROJECTION
    if _PROJECTION is None or _PROJECTION.shape[1] != feature_dim:
        rng = np.random.default_rng(EMBED_SEED)
        _PROJECTION = rng.standard_normal((EMBED_DIM, feature_dim)) / np.sqrt(feature_dim)
    return _PROJECTION


def speaker_embedding(clip: AudioClip, mel_config: MelConfig | None = None,
                      return_details: bool = False):
    """Fixed 32-dim unit-norm voice signature of a clip.

    Features: per-mel-bin mean and standard deviation over frames (each
    centered so common spectral tilt dominates less), plus pitch
    statistics, projected with a seeded random matrix and normalized.
    Clips shorter than half a second are rejected; amplitude is
    RMS-normalized first so the embedding ignores loudness.
    """
    mel_config = mel_config or MelConfig()
    if clip.duration < 0.5:
        raise ValueError(f"clip too short for an embedding: {clip.duration:.3f} s")
    samples = clip.samples
    if clip.sample_rate != mel_config.sample_rate:
        samples = resample(clip, mel_config.sample_rate).samples
    rms = float(np.sqrt(np.mean(samples.astype(np.float64) ** 2)))
    if rms > 0:
        samples = (samples * (0.1 / rms)).astype(np.float32)
    norm_clip = AudioClip(np.clip(samples, -1.0, 1.0), mel_config.sample_rate)

    mel = mel_spectrogram(norm_clip, mel_config)
    mean = mel.mean(axis=0)
    std = mel.std(axis=0)
    pitch, voiced = pitch_statistics(norm_clip.samples, mel_config.sample_rate)
    features = np.concatenate([
        mean - mean.mean(),
        std - std.mean(),
        pitch * np.array([2.0, 4.0, 1.0, 2.0]),
    ])
    projected = _projection_matrix(features.size) @ features
    embedding = projected / max(np.linalg.norm(projected), 1e-12)
    if return_details:
        return embedding, {"voiced": voiced, "pitch_stats": pitch}
    return embedding


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


# --------------------------------------------------------------------------
# conversion metrics
# --------------------------------------------------------------------------


def disentanglement_score(convert_fn, pairs, mel_config: MelConfig | None = None) -> float:
    """Fraction of pairs whose conversion sounds closer to the reference.

    `convert_fn(source_clip, reference_clip) -> AudioClip`; each pair is
    (source_clip, reference_clip) from distinct speakers.  A win means
    cosine(embed(converted), embed(reference)) exceeds
    cosine(embed(converted), embed(source)).
    """
    if not pairs:
        raise ValueError("no evaluation pairs given")
    mel_config = mel_config or MelConfig()
    wins = 0
    for source, reference in pairs:
        converted = convert_fn(source, reference)
        emb_conv = speaker_embedding(converted, mel_config)
        emb_src = speaker_embedding(source, mel_config)
        emb_ref = speaker_embedding(reference, mel_config)
        if cosine_similarity(emb_conv, emb_ref) > cosine_similarity(emb_conv, emb_src):
            wins += 1
    return wins / len(pairs)


def model_converter(model, steps: int = 32, seed: int = 0,
                    glim_iterations: int = 24):
    """Wrap a model as a clip-to-clip conversion function."""

    def convert(source: AudioClip, reference: AudioClip) -> AudioClip:
        rng = np.random.default_rng(seed)
        mel = model.convert(source, reference, rng, steps=steps)
        return griffin_lim(mel, model.config.mel, iterations=glim_iterations,
                           rng=np.random.default_rng(seed + 1))

    return convert


def reconstruction_mse(model, clips, steps: int = 32, seed: int = 0) -> float:
    """Mean squared mel error of source=reference conversion."""
    if not clips:
        raise ValueError("no clips given")
    errors = []
    for clip in clips:
        rng = np.random.default_rng(seed)
        converted = model.convert(clip, clip, rng, steps=steps)
        target = mel_spectrogram(clip, model.config.mel)
        errors.append(float(np.mean((converted - target) ** 2)))
    return float(np.mean(errors))


# --------------------------------------------------------------------------
# adapter report
# --------------------------------------------------------------------------


def adapter_weights(model) -> dict:
    return {
        "content": model.content_adapter.weights().data.astype(float).tolist(),
        "speaker": model.speaker_adapter.weights().data.astype(float).tolist(),
    }


def ascii_bar_chart(weights, width: int = 40) -> str:
    peak = max(max(weights), 1e-9)
    lines = []
    for i, w in enumerate(weights):
        bar = "#" * max(int(round(w / peak * width)), 0)
        lines.append(f"layer {i:2d} | {bar} {w:.4f}")
    return "\n".join(lines)


def write_adapter_report(model, out_dir) -> dict:
    """Emit per-adapter CSVs and a bar-chart image; returns the weights."""
    import pathlib

    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = adapter_weights(model)
    for name, values in weights.items():
        with open(out_dir / f"{name}_adapter.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "weight"])
            for i, w in enumerate(values):
                writer.writerow([i, f"{w:.8f}"])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for ax, (name, values) in zip(axes, weights.items()):
        ax.bar(range(len(values)), values, color="#3b6ea5")
        ax.set_title(f"{name} adapter")
        ax.set_xlabel("layer")
        ax.set_ylabel("weight")
    fig.tight_layout()
    fig.savefig(out_dir / "adapter_weights.png", dpi=110)
    plt.close(fig)
    return weights


# --------------------------------------------------------------------------
# full report
# --------------------------------------------------------------------------


def build_eval_report(model, clips, pairs, rtf_steps=(1, 5, 10),
                      convert_steps: int = 32, seed: int = 0) -> dict:
    """Assemble the evaluation summary used by the CLI `eval` command."""
    if not clips:
        raise ValueError("no evaluation clips")
    timing_clip = max(clips, key=lambda c: c.duration)
    rtf_by_steps = {}
    noisy = False
    for steps in rtf_steps:
        result = rtf(model, timing_clip, steps)
        rtf_by_steps[str(steps)] = result["rtf"]
        noisy = noisy or result["noisy"]

    similarities = []
    converter = model_converter(model, steps=convert_steps, seed=seed)
    for source, reference in pairs:
        converted = converter(source, reference)
        similarities.append(
            cosine_similarity(
                speaker_embedding(converted, model.config.mel),
                speaker_embedding(reference, model.config.mel),
            )
        )
    win_rate = disentanglement_score(converter, pairs, model.config.mel)

    return {
        "rtf": rtf_by_steps,
        "rtf_noisy": noisy,
        "mel_reconstruction_mse": reconstruction_mse(model, clips[:4], steps=convert_steps,
                                                     seed=seed),
        "speaker_similarity": {
            "mean": float(np.mean(similarities)) if similarities else None,
            "per_pair": similarities,
        },
        "disentanglement_win_rate": win_rate,
        "adapter_weights": adapter_weights(model),
    }
