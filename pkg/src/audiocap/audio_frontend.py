"""Waveform ingestion and mel-spectrogram features.

Waveforms are resampled to 16 kHz and framed with a 25 ms Hann window at a
10 ms hop into 128 log-mel bands (about 100 frames per second).  A strided
linear patch embedding then halves the frame rate to roughly 50 Hz, which is
the rate the captioner's downsampling projector expects.  SpecAugment-style
masking operates on the mel frames.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .layers import Linear
from .numerics import Rng

SAMPLE_RATE = 16000
N_MELS = 128
WIN_SAMPLES = 400   # 25 ms at 16 kHz
HOP_SAMPLES = 160   # 10 ms at 16 kHz
N_FFT = 1024        # fine enough that even the narrowest mel filter spans a bin
LOG_FLOOR = 1e-10
MEL_FRAME_RATE = SAMPLE_RATE / HOP_SAMPLES  # 100 Hz


@dataclass
class AudioClip:
    """Mono waveform in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    """Log-mel energies, one row per 10 ms hop, 128 bands."""

    frames: np.ndarray
    hop_seconds: float = 0.010
    win_seconds: float = 0.025

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise ValueError(f"mel frames must be (T, {N_MELS}), got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FeatureSeq:
    """Time-major embedding matrix with a nominal frame rate in Hz."""

    frames: np.ndarray
    nominal_rate: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"feature frames must be 2-D with T >= 1, got {self.frames.shape}")


def read_wav(path) -> AudioClip:
    """Read a PCM 16-bit little-endian WAV; stereo keeps the first channel."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM WAV is supported")
        n_channels = w.getnchannels()
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels > 1:
        data = data[::n_channels]
    return AudioClip(samples=data, sample_rate=rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(clip.samples, -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def resample(clip: AudioClip, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Linear-interpolation resampling; adequate for toy-scale audio."""
    if clip.sample_rate == target_rate:
        return clip
    n_out = int(round(len(clip.samples) * target_rate / clip.sample_rate))
    t_in = np.arange(len(clip.samples)) / clip.sample_rate
    t_out = np.arange(n_out) / target_rate
    return AudioClip(np.interp(t_out, t_in, clip.samples), target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_bank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """Triangular mel filters, (n_mels, n_fft//2 + 1), spanning 0 .. Nyquist."""
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / n_fft
    mel_points = np.linspace(0.0, float(hz_to_mel(sample_rate / 2)), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (fft_freqs - left) / max(center - left, 1e-12)
        down = (right - fft_freqs) / max(right - center, 1e-12)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
    return bank


_FILTER_BANK_CACHE: dict[tuple, np.ndarray] = {}


def _filter_bank_cached() -> np.ndarray:
    key = (N_MELS, N_FFT, SAMPLE_RATE)
    if key not in _FILTER_BANK_CACHE:
        _FILTER_BANK_CACHE[key] = mel_filter_bank()
    return _FILTER_BANK_CACHE[key]


def log_mel(clip: AudioClip) -> MelSpectrogram:
    """Log-mel features: T = 1 + floor((N - 400) / 160) frames of 128 bands.

    Power below 1e-10 is floored before the log, so a silent clip produces
    ln(1e-10) everywhere and no frame is ever non-finite.
    """
    clip = resample(clip, SAMPLE_RATE)
    n = len(clip.samples)
    if n < WIN_SAMPLES:
        raise ValueError(
            f"clip too short for feature extraction: {n} samples < one {WIN_SAMPLES}-sample window"
        )
    n_frames = 1 + (n - WIN_SAMPLES) // HOP_SAMPLES
    window = np.hanning(WIN_SAMPLES)
    idx = np.arange(WIN_SAMPLES)[None, :] + HOP_SAMPLES * np.arange(n_frames)[:, None]
    frames = clip.samples[idx] * window[None, :]
    spectrum = np.fft.rfft(frames, n=N_FFT, axis=1)
    power = np.abs(spectrum) ** 2
    mel_power = power @ _filter_bank_cached().T
    return MelSpectrogram(frames=np.log(np.maximum(mel_power, LOG_FLOOR)))


class PatchEmbed:
    """Strided linear patch embedding over the mel frames.

    Groups ``time_stride`` consecutive mel frames into one flattened patch and
    applies a learned linear map, halving the 100 Hz mel rate to ~50 Hz at the
    default stride of 2.  A stand-in for a full convolutional patch grid.
    """

    def __init__(self, out_dim: int, rng: Rng, time_stride: int = 2):
        self.time_stride = time_stride
        self.out_dim = out_dim
        self.proj = Linear(time_stride * N_MELS, out_dim, rng)

    def forward(self, mel: MelSpectrogram, ctx: dict | None = None) -> np.ndarray:
        t = mel.num_frames
        if t < self.time_stride:
            raise ValueError(f"need at least {self.time_stride} mel frames, got {t}")
        t_out = t // self.time_stride
        patches = mel.frames[: t_out * self.time_stride].reshape(
            t_out, self.time_stride * N_MELS
        )
        return self.proj.forward(patches, ctx)

    def backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        return self.proj.backward(dy, ctx)

    def params(self):
        for n, p in self.proj.params():
            yield f"proj.{n}", p


def patchify(mel: MelSpectrogram, patch_embed: PatchEmbed) -> FeatureSeq:
    """Embed mel frames into ~50 Hz patch features (floor(T/stride) rows)."""
    frames = patch_embed.forward(mel)
    return FeatureSeq(frames=frames, nominal_rate=MEL_FRAME_RATE / patch_embed.time_stride)


def spec_augment(
    mel: MelSpectrogram,
    rng: Rng,
    n_time_masks: int = 2,
    max_t: int = 10,
    n_freq_masks: int = 2,
    max_f: int = 16,
) -> MelSpectrogram:
    """Mask random time and frequency stripes with the spectrogram mean.

    Mask widths are drawn uniformly in [0, max]; unmasked cells are returned
    bit-identical to the input.
    """
    t = mel.num_frames
    if max_t >= t:
        raise ValueError(f"max_t={max_t} must be < number of frames {t}")
    if max_f >= N_MELS:
        raise ValueError(f"max_f={max_f} must be < {N_MELS}")
    out = mel.frames.copy()
    fill = float(mel.frames.mean())
    for _ in range(n_time_masks):
        width = int(rng.integers(0, max_t + 1))
        if width == 0:
            continue
        start = int(rng.integers(0, t - width + 1))
        out[start : start + width, :] = fill
    for _ in range(n_freq_masks):
        width = int(rng.integers(0, max_f + 1))
        if width == 0:
            continue
        start = int(rng.integers(0, N_MELS - width + 1))
        out[:, start : start + width] = fill
    return MelSpectrogram(frames=out)
