"""Acoustic feature extraction: the 193-dimensional music descriptor.

Layout of a feature vector::

    [0, 40)    MFCC (coefficient 0 included)
    [40, 52)   chroma, class 0 = C
    [52, 59)   spectral contrast, 7 sub-bands
    [59, 65)   tonal centroid
    [65, 193)  log mel power, 128 bands

Every per-frame descriptor is averaged over the frames of a 10 s window, and
segment features are the mean over the 10 s windows (5 s hop) of a 60 s
segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sp_signal

from .errors import InvalidInput

SAMPLE_RATE = 22050
FRAME_LEN = 2048
HOP = 512
N_MELS = 128
N_MFCC = 40
LOG_FLOOR = 1e-10
C4_HZ = 261.6256
CHROMA_MIN_HZ = 20.0
CONTRAST_EDGES = (0.0, 200.0, 400.0, 800.0, 1600.0, 3200.0, 6400.0)
CONTRAST_QUANTILE = 0.02
TONNETZ_RADII = (1.0, 1.0, 0.5)

FEATURE_DIM = 193
LAYOUT = {
    "mfcc": slice(0, 40),
    "chroma": slice(40, 52),
    "contrast": slice(52, 59),
    "tonnetz": slice(59, 65),
    "mel": slice(65, 193),
}
OFFSETS = (0, 40, 52, 59, 65)


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidInput(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """Magnitude STFT, shape (frames, frame_len // 2 + 1)."""

    magnitudes: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=np.float64)
        if mags.ndim != 2 or mags.shape[1] != self.frame_len // 2 + 1:
            raise InvalidInput(
                f"magnitudes must be (frames, {self.frame_len // 2 + 1}), got {mags.shape}"
            )
        if np.any(mags < 0):
            raise InvalidInput("magnitudes must be non-negative")
        object.__setattr__(self, "magnitudes", mags)

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.frame_len


@dataclass(frozen=True)
class SegmentSpec:
    segment_len: float = 60.0
    window_len: float = 10.0
    window_hop: float = 5.0

    def __post_init__(self):
        if self.window_hop <= 0:
            raise InvalidInput("window_hop must be positive")
        if not 0 < self.window_len <= self.segment_len:
            raise InvalidInput("need 0 < window_len <= segment_len")

    @property
    def n_windows(self) -> int:
        return int((self.segment_len - self.window_len) // self.window_hop) + 1


@dataclass(frozen=True)
class MusicFeatureVector:
    values: np.ndarray
    id: str = ""
    layout: dict = field(default_factory=lambda: dict(LAYOUT), repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (FEATURE_DIM,):
            raise InvalidInput(f"feature vector must have {FEATURE_DIM} values, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInput("feature vector contains non-finite values")
        object.__setattr__(self, "values", v)

    def part(self, name: str) -> np.ndarray:
        return self.values[LAYOUT[name]]


# ---------------------------------------------------------------------------
# signal plumbing


def resample_mono(clip: AudioClip, target_rate: int) -> AudioClip:
    """Downmix to mono (channel mean) and resample with a polyphase filter.

    Multi-channel input is given as ``samples`` of shape (n, channels).
    """
    if target_rate <= 0:
        raise InvalidInput(f"target_rate must be positive, got {target_rate}")
    x = clip.samples
    if x.ndim == 2:
        x = x.mean(axis=1)
    elif x.ndim != 1:
        raise InvalidInput(f"samples must be 1-D or (n, channels), got shape {x.shape}")
    if x.size == 0:
        raise InvalidInput("cannot resample an empty clip")
    if target_rate == clip.sample_rate:
        return AudioClip(x.copy(), target_rate, clip.id)
    ratio = Fraction(target_rate, clip.sample_rate)
    y = sp_signal.resample_poly(x, ratio.numerator, ratio.denominator)
    return AudioClip(y, target_rate, clip.id)


def stft(clip: AudioClip, frame_len: int = FRAME_LEN, hop: int = HOP) -> Spectrogram:
    x = clip.samples
    if x.ndim != 1:
        raise InvalidInput("stft needs a mono clip")
    if hop <= 0 or frame_len <= 0:
        raise InvalidInput("frame_len and hop must be positive")
    if x.shape[0] < frame_len:
        raise InvalidInput(f"clip has {x.shape[0]} samples, shorter than one frame ({frame_len})")
    n_frames = 1 + (x.shape[0] - frame_len) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:n_frames]
    window = sp_signal.get_window("hann", frame_len, fftbins=True)
    mags = np.abs(np.fft.rfft(frames * window, axis=1))
    return Spectrogram(mags, frame_len, hop, clip.sample_rate)


# ---------------------------------------------------------------------------
# mel scale


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, frame_len: int = FRAME_LEN,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """HTK-scale triangular filters spanning 0 Hz to Nyquist, peak height 1."""
    n_bins = frame_len // 2 + 1
    if n_mels < 1:
        raise InvalidInput("n_mels must be >= 1")
    if n_mels > n_bins:
        raise InvalidInput(f"n_mels={n_mels} exceeds the {n_bins} STFT bins")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_bins) * sample_rate / frame_len
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    if not np.all(fb.sum(axis=1) > 0):
        raise InvalidInput(
            f"{n_mels} mel bands are too narrow for frame_len={frame_len} at {sample_rate} Hz"
        )
    return fb


def _mel_power(spec: Spectrogram, n_mels: int) -> np.ndarray:
    fb = mel_filterbank(n_mels, spec.frame_len, spec.sample_rate)
    return (spec.magnitudes ** 2) @ fb.T


# ---------------------------------------------------------------------------
# descriptors (each returns the mean over frames)


def mfcc(spec: Spectrogram, n_mels: int = N_MELS, n_coeffs: int = N_MFCC) -> np.ndarray:
    log_mel = np.log(np.maximum(_mel_power(spec, n_mels), LOG_FLOOR))
    coeffs = sp_fft.dct(log_mel, type=2, norm="ortho", axis=1)[:, :n_coeffs]
    return coeffs.mean(axis=0)


def mel_features(spec: Spectrogram, n_mels: int = N_MELS) -> np.ndarray:
    return np.log(_mel_power(spec, n_mels) + LOG_FLOOR).mean(axis=0)


def pitch_class_map(spec: Spectrogram) -> np.ndarray:
    """(bins, 12) 0/1 matrix assigning each bin above 20 Hz to a pitch class."""
    freqs = spec.bin_frequencies()
    mapping = np.zeros((spec.n_bins, 12))
    keep = freqs > CHROMA_MIN_HZ
    classes = np.mod(np.round(12.0 * np.log2(freqs[keep] / C4_HZ)).astype(int), 12)
    mapping[np.flatnonzero(keep), classes] = 1.0
    return mapping


def chroma_frames(spec: Spectrogram) -> np.ndarray:
    """Per-frame pitch-class magnitude sums, before normalisation."""
    return spec.magnitudes @ pitch_class_map(spec)


def chroma(spec: Spectrogram) -> np.ndarray:
    raw = chroma_frames(spec)
    peak = raw.max(axis=1, keepdims=True)
    normed = np.divide(raw, peak, out=np.zeros_like(raw), where=peak > 0)
    return normed.mean(axis=0)


def contrast_bands(sample_rate: int, frame_len: int) -> list[np.ndarray]:
    """Bin indices of the 7 sub-bands; the top band is closed at Nyquist."""
    freqs = np.arange(frame_len // 2 + 1) * sample_rate / frame_len
    nyquist = sample_rate / 2.0
    bands = []
    for i, lo in enumerate(CONTRAST_EDGES):
        if i + 1 < len(CONTRAST_EDGES):
            idx = np.flatnonzero((freqs >= lo) & (freqs < CONTRAST_EDGES[i + 1]))
        else:
            idx = np.flatnonzero((freqs >= lo) & (freqs <= nyquist))
        if idx.size == 0 or lo >= nyquist:
            raise InvalidInput(
                f"sample rate {sample_rate} Hz leaves contrast band starting at {lo} Hz empty"
            )
        bands.append(idx)
    return bands


def spectral_contrast(spec: Spectrogram, quantile: float = CONTRAST_QUANTILE) -> np.ndarray:
    out = np.empty(len(CONTRAST_EDGES))
    for b, idx in enumerate(contrast_bands(spec.sample_rate, spec.frame_len)):
        band = np.sort(spec.magnitudes[:, idx], axis=1)
        k = max(1, int(quantile * idx.size))
        valley = band[:, :k].mean(axis=1)
        peak = band[:, -k:].mean(axis=1)
        out[b] = (np.log(peak + LOG_FLOOR) - np.log(valley + LOG_FLOOR)).mean()
    return out


def tonnetz_matrix() -> np.ndarray:
    """6x12 projection of pitch classes onto fifths, minor and major thirds."""
    r1, r2, r3 = TONNETZ_RADII
    l = np.arange(12)
    return np.stack([
        r1 * np.sin(l * 7 * np.pi / 6), r1 * np.cos(l * 7 * np.pi / 6),
        r2 * np.sin(l * 3 * np.pi / 2), r2 * np.cos(l * 3 * np.pi / 2),
        r3 * np.sin(l * 2 * np.pi / 3), r3 * np.cos(l * 2 * np.pi / 3),
    ])


def tonal_centroid_from_chroma(frames: np.ndarray) -> np.ndarray:
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    norm = np.maximum(np.abs(frames).sum(axis=1, keepdims=True), LOG_FLOOR)
    return ((frames / norm) @ tonnetz_matrix().T).mean(axis=0)


def tonal_centroid(spec: Spectrogram) -> np.ndarray:
    return tonal_centroid_from_chroma(chroma_frames(spec))


# ---------------------------------------------------------------------------
# windows and segments


def features_from_spectrogram(spec: Spectrogram) -> np.ndarray:
    return np.concatenate([
        mfcc(spec),
        chroma(spec),
        spectral_contrast(spec),
        tonal_centroid(spec),
        mel_features(spec),
    ])


def extract_window_features(clip_window: AudioClip, window_len: float = 10.0) -> MusicFeatureVector:
    expected = int(round(window_len * clip_window.sample_rate))
    if clip_window.samples.ndim != 1 or clip_window.samples.shape[0] != expected:
        raise InvalidInput(
            f"window must be {expected} mono samples ({window_len} s), "
            f"got shape {clip_window.samples.shape}"
        )
    return MusicFeatureVector(features_from_spectrogram(stft(clip_window)), clip_window.id)


def window_bounds(n_samples: int, sample_rate: int, spec: SegmentSpec) -> list[tuple[int, int]]:
    win = int(round(spec.window_len * sample_rate))
    hop = int(round(spec.window_hop * sample_rate))
    return [(s, s + win) for s in range(0, n_samples - win + 1, hop)]


def extract_segment_features(segment: AudioClip, spec: SegmentSpec | None = None) -> MusicFeatureVector:
    spec = spec or SegmentSpec()
    expected = int(round(spec.segment_len * segment.sample_rate))
    if segment.samples.ndim != 1 or segment.samples.shape[0] != expected:
        raise InvalidInput(
            f"segment must be {expected} mono samples ({spec.segment_len} s), "
            f"got shape {segment.samples.shape}"
        )
    windows = [
        extract_window_features(
            AudioClip(segment.samples[a:b], segment.sample_rate, segment.id), spec.window_len
        ).values
        for a, b in window_bounds(expected, segment.sample_rate, spec)
    ]
    return MusicFeatureVector(np.mean(windows, axis=0), segment.id)


def split_segments(clip: AudioClip, spec: SegmentSpec | None = None) -> list[AudioClip]:
    """Cut a song into consecutive full-length segments; the tail is dropped."""
    spec = spec or SegmentSpec()
    seg = int(round(spec.segment_len * clip.sample_rate))
    n = clip.samples.shape[0] // seg
    return [
        AudioClip(clip.samples[k * seg:(k + 1) * seg], clip.sample_rate, f"{clip.id}#{k}")
        for k in range(n)
    ]
