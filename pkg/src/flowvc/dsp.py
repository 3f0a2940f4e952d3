"""Waveform I/O, resampling, log-mel analysis, and Griffin-Lim synthesis.

All functions here are pure: they read their inputs and return new
arrays, so concurrent use is safe.  The analysis front end is fixed at
16 kHz with a 1280-sample window, hop 320, and an 80-band mel
filterbank; frames are centered via reflect padding so that a clip of
`n` samples yields exactly `floor(n / hop)` frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AudioFormatError",
    "AudioClip",
    "MelConfig",
    "load_wav",
    "save_wav",
    "resample",
    "mel_filterbank",
    "mel_frequencies",
    "mel_spectrogram",
    "stft_magnitude",
    "griffin_lim",
]


class AudioFormatError(ValueError):
    """Unreadable or unsupported audio data."""


@dataclass
class AudioClip:
    """Mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioFormatError("AudioClip requires a nonempty 1-D sample array")
        if self.sample_rate <= 0:
            raise AudioFormatError(f"invalid sample rate {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelConfig:
    sample_rate: int = 16000
    window_size: int = 1280
    fft_size: int = 1280
    hop: int = 320
    n_mels: int = 80
    log_floor: float = 1e-5
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        if self.hop > self.window_size:
            raise ValueError(f"hop {self.hop} exceeds window {self.window_size}")
        if self.n_mels >= self.fft_size // 2 + 1:
            raise ValueError(f"n_mels {self.n_mels} too large for fft {self.fft_size}")
        if self.log_floor <= 0:
            raise ValueError("log floor must be positive")


# --------------------------------------------------------------------------
# WAV I/O (RIFF PCM16 / IEEE-float32)
# --------------------------------------------------------------------------


def _read_chunk_header(buf: bytes, pos: int, context: str):
    if pos + 8 > len(buf):
        raise AudioFormatError(f"truncated WAV file: missing {context} chunk header")
    cid, size = struct.unpack_from("<4sI", buf, pos)
    return cid, size, pos + 8


def load_wav(path) -> AudioClip:
    """Read a PCM WAV file as a mono clip scaled to [-1, 1].

    Accepts 16-bit integer and 32-bit float encodings, mono or stereo
    (channels are averaged).  Anything else is rejected with the format
    details in the message.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12:
        raise AudioFormatError("truncated WAV file: missing RIFF chunk")
    riff, _size, wave_id = struct.unpack_from("<4sI4s", buf, 0)
    if riff != b"RIFF" or wave_id != b"WAVE":
        raise AudioFormatError(
            f"not a RIFF/WAVE file (got {riff!r}/{wave_id!r})"
        )
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(buf):
        cid, size, pos = _read_chunk_header(buf, pos, "next")
        body = buf[pos : pos + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise AudioFormatError("truncated WAV file: 'fmt ' chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < size:
                raise AudioFormatError(
                    f"truncated WAV file: 'data' chunk promises {size} bytes, "
                    f"found {len(body)}"
                )
            data = body
        pos += size + (size & 1)
    if fmt is None:
        raise AudioFormatError("malformed WAV file: missing 'fmt ' chunk")
    if data is None:
        raise AudioFormatError("malformed WAV file: missing 'data' chunk")

    audio_format, channels, sample_rate, _brate, _align, bits = fmt
    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    elif audio_format == 3 and bits == 32:
        raw = np.frombuffer(data, dtype="<f4").astype(np.float32)
    else:
        raise AudioFormatError(
            f"unsupported WAV encoding: format tag {audio_format}, {bits}-bit "
            "(expected PCM 16-bit or IEEE float 32-bit)"
        )
    if channels < 1:
        raise AudioFormatError("malformed WAV file: zero channels")
    if channels > 1:
        usable = (raw.size // channels) * channels
        raw = raw[:usable].reshape(-1, channels).mean(axis=1)
    peak = np.max(np.abs(raw)) if raw.size else 0.0
    if peak > 1.0:
        raw = raw / peak
    return AudioClip(samples=raw, sample_rate=int(sample_rate))


def save_wav(path, clip: AudioClip) -> None:
    """Write a mono 16-bit PCM little-endian WAV file."""
    samples = np.clip(clip.samples, -1.0, 1.0)
    pcm = np.round(samples * 32767.0).astype("<i2").tobytes()
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 36 + len(pcm)))
        fh.write(b"WAVE")
        fh.write(b"fmt ")
        fh.write(
            struct.pack(
                "<IHHIIHH",
                16,
                1,
                1,
                clip.sample_rate,
                clip.sample_rate * 2,
                2,
                16,
            )
        )
        fh.write(b"data")
        fh.write(struct.pack("<I", len(pcm)))
        fh.write(pcm)


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------


def resample(clip: AudioClip, target_rate: int = 16000, taps: int = 65) -> AudioClip:
    """Band-limited resampling with a Hann-windowed sinc kernel.

    Interpolation weights are renormalized per output sample so a
    constant signal stays constant.  `taps` controls kernel support.
    """
    if target_rate <= 0:
        raise ValueError(f"invalid target rate {target_rate}")
    if clip.sample_rate == target_rate:
        return AudioClip(clip.samples.copy(), target_rate)
    x = clip.samples.astype(np.float64)
    ratio = clip.sample_rate / target_rate
    n_out = max(1, round(clip.samples.size * target_rate / clip.sample_rate))
    half = max(1, taps // 2)
    cutoff = min(1.0, 1.0 / ratio)

    positions = np.arange(n_out) * ratio  # output center in input coordinates
    base = np.floor(positions).astype(np.int64)
    offsets = np.arange(-half, half + 1)
    idx = base[:, None] + offsets[None, :]
    dist = positions[:, None] - idx
    win = 0.5 + 0.5 * np.cos(np.pi * dist / (half + 1))
    win[np.abs(dist) > half + 1] = 0.0
    weights = cutoff * np.sinc(cutoff * dist) * win
    weights /= np.maximum(weights.sum(axis=1, keepdims=True), 1e-12)

    valid = (idx >= 0) & (idx < x.size)
    gathered = np.where(valid, x[np.clip(idx, 0, x.size - 1)], 0.0)
    y = (weights * gathered).sum(axis=1)
    return AudioClip(np.clip(y, -1.0, 1.0).astype(np.float32), target_rate)


# --------------------------------------------------------------------------
# Mel analysis
# --------------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_frequencies(config: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel filter."""
    edges = np.linspace(
        _hz_to_mel(config.fmin), _hz_to_mel(config.fmax), config.n_mels + 2
    )
    return _mel_to_hz(edges)[1:-1]


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular mel filterbank, peak 1.0, shape (n_mels, fft_size//2 + 1).

    Rows are nonnegative and each covers one contiguous frequency band.
    """
    n_bins = config.fft_size // 2 + 1
    fft_freqs = np.linspace(0.0, config.sample_rate / 2.0, n_bins)
    edges_hz = _mel_to_hz(
        np.linspace(_hz_to_mel(config.fmin), _hz_to_mel(config.fmax), config.n_mels + 2)
    )
    bank = np.zeros((config.n_mels, n_bins), dtype=np.float64)
    for i in range(config.n_mels):
        lo, center, hi = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        rising = (fft_freqs - lo) / max(center - lo, 1e-9)
        falling = (hi - fft_freqs) / max(hi - center, 1e-9)
        bank[i] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def _frame_signal(samples: np.ndarray, config: MelConfig) -> np.ndarray:
    """Reflect-pad and slice into frames; frame k is centered at k * hop."""
    if samples.size < config.hop:
        raise ValueError(
            f"clip of {samples.size} samples is shorter than one hop ({config.hop})"
        )
    n_frames = samples.size // config.hop
    pad = config.fft_size // 2
    padded = np.pad(samples.astype(np.float64), pad, mode="reflect")
    frames = np.stack(
        [padded[k * config.hop : k * config.hop + config.fft_size] for k in range(n_frames)]
    )
    return frames


def stft_magnitude(samples: np.ndarray, config: MelConfig) -> np.ndarray:
    """Magnitude spectrogram, shape (frames, fft_size//2 + 1)."""
    frames = _frame_signal(samples, config)
    window = np.hanning(config.window_size)
    return np.abs(np.fft.rfft(frames * window, n=config.fft_size, axis=1))


def mel_spectrogram(clip: AudioClip, config: MelConfig | None = None) -> np.ndarray:
    """Log-power mel spectrogram, shape (frames, n_mels).

    Values are ln(max(mel_power, log_floor)); the frame count is
    floor(num_samples / hop).
    """
    config = config or MelConfig()
    if clip.sample_rate != config.sample_rate:
        raise ValueError(
            f"clip rate {clip.sample_rate} != analysis rate {config.sample_rate}; "
            "resample first"
        )
    mag = stft_magnitude(clip.samples, config)
    power = mag**2
    mel_power = power @ mel_filterbank(config).T
    return np.log(np.maximum(mel_power, config.log_floor)).astype(np.float32)


# --------------------------------------------------------------------------
# Griffin-Lim
# --------------------------------------------------------------------------


def _istft(spec: np.ndarray, config: MelConfig, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of `stft_magnitude`'s framing."""
    window = np.hanning(config.window_size)
    frames = np.fft.irfft(spec, n=config.fft_size, axis=1) * window
    pad = config.fft_size // 2
    total = length + 2 * pad
    acc = np.zeros(total)
    norm = np.zeros(total)
    for k in range(frames.shape[0]):
        start = k * config.hop
        acc[start : start + config.fft_size] += frames[k]
        norm[start : start + config.fft_size] += window**2
    out = acc / np.maximum(norm, 1e-8)
    return out[pad : pad + length]


def mel_to_linear_magnitude(
    mel_log: np.ndarray, config: MelConfig, refine_steps: int = 20
) -> np.ndarray:
    """Approximate linear magnitude from log-mel power.

    Initializes by spreading each band's power across its triangle via
    the (row-normalized) filterbank transpose, clipped at zero, then
    sharpens with multiplicative nonnegative least-squares updates so
    re-analysis reproduces the input bands closely.
    """
    bank = mel_filterbank(config)
    mel_power = np.exp(np.asarray(mel_log, dtype=np.float64))
    spread = bank / np.maximum(bank.sum(axis=1, keepdims=True), 1e-9)
    lin_power = np.maximum(mel_power @ spread, 0.0)
    colsum = np.maximum(bank.sum(axis=0), 1e-12)
    for _ in range(refine_steps):
        ratio = mel_power / np.maximum(lin_power @ bank.T, 1e-12)
        lin_power *= (ratio @ bank) / colsum
    return np.sqrt(np.maximum(lin_power, 0.0))


def griffin_lim(
    mel_log: np.ndarray,
    config: MelConfig | None = None,
    iterations: int = 32,
    rng: np.random.Generator | None = None,
) -> AudioClip:
    """Reconstruct a waveform from a log-mel spectrogram.

    Inverts the mel filterbank approximately, then runs `iterations`
    rounds of phase retrieval.  With iterations=0 the random-phase
    reconstruction is returned directly.  Output length is frames * hop.
    """
    config = config or MelConfig()
    mel_log = np.asarray(mel_log)
    if not np.all(np.isfinite(mel_log)):
        raise ValueError("griffin_lim requires a finite mel spectrogram")
    if mel_log.ndim != 2 or mel_log.shape[1] != config.n_mels:
        raise ValueError(
            f"expected (frames, {config.n_mels}) mel input, got {mel_log.shape}"
        )
    rng = rng or np.random.default_rng(0)
    target = mel_to_linear_magnitude(mel_log, config)
    length = mel_log.shape[0] * config.hop

    phase = np.exp(2j * np.pi * rng.random(target.shape))
    x = _istft(target * phase, config, length)
    for _ in range(iterations):
        spec = np.fft.rfft(
            _frame_signal(x, config) * np.hanning(config.window_size),
            n=config.fft_size,
            axis=1,
        )
        mag = np.abs(spec)
        phase = spec / np.maximum(mag, 1e-12)
        x = _istft(target * phase, config, length)
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return AudioClip(x.astype(np.float32), config.sample_rate)
