"""Synthetic multi-speaker corpus.

Utterances are "content scripts" (sequences of vowel-like segments,
each defined by formant targets) rendered per speaker with a simple
source-filter synthesizer: an impulse train at the speaker's base pitch
with a +/-10% contour, a cascade of second-order resonators at the
script formants scaled by the speaker's formant shift, and a spectral
tilt.  Two renderings of the same script share content and differ only
in timbre, which is exactly the structure the conversion model is
supposed to exploit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .config import seed_stream
from .dsp import AudioClip

__all__ = ["SynthSpeaker", "Script", "CorpusItem", "make_speakers", "make_scripts",
           "render_utterance", "make_corpus"]

SAMPLE_RATE = 16000

# formant targets (F1, F2, F3) for the vowel inventory
VOWEL_FORMANTS = {
    "a": (780.0, 1220.0, 2500.0),
    "e": (520.0, 1900.0, 2550.0),
    "i": (310.0, 2280.0, 2950.0),
    "o": (450.0, 820.0, 2600.0),
    "u": (330.0, 720.0, 2530.0),
}

F0_RANGE = (85.0, 295.0)
FORMANT_SHIFT_RANGE = (0.8, 1.25)
TILT_RANGE = (-14.0, -10.0)  # dB/octave; keeps the fundamental dominant


@dataclass
class SynthSpeaker:
    f0_base: float
    formant_shift: float
    spectral_tilt: float
    seed: int

    def __post_init__(self):
        if not 80.0 <= self.f0_base <= 300.0:
            raise ValueError(f"f0_base {self.f0_base} outside [80, 300]")
        if not 0.8 <= self.formant_shift <= 1.25:
            raise ValueError(f"formant_shift {self.formant_shift} outside [0.8, 1.25]")


@dataclass
class Script:
    """Shared linguistic content: per-segment (formants, duration)."""

    segments: list  # of ((F1, F2, F3), seconds)
    script_id: int


@dataclass
class CorpusItem:
    clip: AudioClip
    speaker_id: int
    script_id: int


def make_speakers(num_speakers: int, seed: int) -> list:
    """Speakers with base pitches spread across the range plus jitter."""
    if num_speakers < 1:
        raise ValueError("need at least one speaker")
    rng = seed_stream(seed, "corpus-speakers")
    lo, hi = F0_RANGE
    speakers = []
    for i in range(num_speakers):
        frac = i / max(num_speakers - 1, 1)
        f0 = lo + frac * (hi - lo) + float(rng.uniform(-5, 5))
        f0 = float(np.clip(f0, 80.0, 300.0))
        speakers.append(
            SynthSpeaker(
                f0_base=f0,
                formant_shift=float(rng.uniform(*FORMANT_SHIFT_RANGE)),
                spectral_tilt=float(rng.uniform(*TILT_RANGE)),
                seed=int(rng.integers(1 << 31)),
            )
        )
    return speakers


def make_scripts(num_scripts: int, seed: int) -> list:
    """Random vowel-segment scripts with total duration in [0.8, 1.6] s."""
    rng = seed_stream(seed, "corpus-scripts")
    vowels = sorted(VOWEL_FORMANTS)
    scripts = []
    for sid in range(num_scripts):
        n_seg = int(rng.integers(3, 7))
        durations = rng.uniform(0.15, 0.35, size=n_seg)
        total = float(rng.uniform(0.85, 1.55))
        durations = durations / durations.sum() * total
        segments = []
        for d in durations:
            vowel = vowels[rng.integers(len(vowels))]
            jitter = rng.uniform(0.94, 1.06, size=3)
            formants = tuple(float(f * j) for f, j in zip(VOWEL_FORMANTS[vowel], jitter))
            segments.append((formants, float(d)))
        scripts.append(Script(segments=segments, script_id=sid))
    return scripts


def _impulse_train(f0_contour: np.ndarray, rate: int) -> np.ndarray:
    phase = np.cumsum(f0_contour / rate)
    x = np.zeros(f0_contour.size)
    x[1:][np.diff(np.floor(phase)) >= 1] = 1.0
    return x


def _resonator_sos(freq: float, rate: int) -> np.ndarray:
    bandwidth = 80.0 + freq / 15.0
    r = np.exp(-np.pi * bandwidth / rate)
    theta = 2.0 * np.pi * freq / rate
    peak_gain = (1.0 - r) * np.sqrt(1.0 - 2.0 * r * np.cos(2.0 * theta) + r * r)
    return np.array([[peak_gain, 0.0, 0.0, 1.0, -2.0 * r * np.cos(theta), r * r]])


def _apply_tilt(x: np.ndarray, tilt_db_oct: float, f_ref: float, rate: int) -> np.ndarray:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, 1.0 / rate)
    gain = 10.0 ** (tilt_db_oct * np.log2(np.maximum(freqs, f_ref) / f_ref) / 20.0)
    gain[freqs < 0.6 * f_ref] = 0.0  # no DC or sub-fundamental rumble
    return np.fft.irfft(spec * gain, n=x.size)


def render_utterance(script: Script, speaker: SynthSpeaker,
                     rate: int = SAMPLE_RATE) -> AudioClip:
    """Render one script with one speaker's voice.

    Deterministic: the per-utterance randomness (pitch drift phase,
    aspiration noise) is seeded from the speaker and script identities.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([speaker.seed, script.script_id])
    )
    total = sum(d for _, d in script.segments)
    n = int(round(total * rate))
    t = np.arange(n) / rate

    mod_freq = float(rng.uniform(1.5, 3.5))
    mod_phase = float(rng.uniform(0, 2 * np.pi))
    contour = speaker.f0_base * (1.0 + 0.1 * np.sin(2 * np.pi * mod_freq * t + mod_phase))
    source = _impulse_train(contour, rate)
    source += 0.003 * rng.standard_normal(n)  # light aspiration

    out = np.zeros(n)
    fade = int(0.01 * rate)
    cursor = 0
    for formants, dur in script.segments:
        seg_len = int(round(dur * rate))
        lo = max(cursor - fade, 0)
        hi = min(cursor + seg_len + fade, n)
        seg = source[lo:hi].copy()
        for f in formants:
            seg = signal.sosfilt(_resonator_sos(f * speaker.formant_shift, rate), seg)
        window = np.ones(hi - lo)
        ramp = np.linspace(0.0, 1.0, fade)
        if lo > 0:
            window[:fade] = ramp
        if hi < n:
            window[-fade:] = ramp[::-1]
        out[lo:hi] += seg * window
        cursor += seg_len

    out = _apply_tilt(out, speaker.spectral_tilt, speaker.f0_base, rate)
    rms = np.sqrt(np.mean(out**2))
    if rms > 0:
        out *= 0.15 / rms
    peak = np.max(np.abs(out))
    if peak > 0.95:
        out *= 0.95 / peak
    return AudioClip(out.astype(np.float32), rate)


def make_corpus(num_speakers: int, utts_per_speaker: int, seed: int,
                rate: int = SAMPLE_RATE, script_offset: int = 0) -> list:
    """num_speakers x utts_per_speaker clips; every speaker renders every
    script, so content is shared across speakers."""
    if num_speakers < 1 or utts_per_speaker < 1:
        raise ValueError("speaker and utterance counts must be positive")
    speakers = make_speakers(num_speakers, seed)
    scripts = make_scripts(utts_per_speaker, seed)
    for script in scripts:
        script.script_id += script_offset
    items = []
    for sid, speaker in enumerate(speakers):
        for script in scripts:
            items.append(
                CorpusItem(
                    clip=render_utterance(script, speaker, rate),
                    speaker_id=sid,
                    script_id=script.script_id,
                )
            )
    return items
