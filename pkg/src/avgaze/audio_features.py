"""Log mel-filterbank front-end.

Pipeline: pre-emphasis -> overlapping Hamming-windowed frames -> power
spectrum -> triangular mel filters -> log with a floor -> optional
corpus-level z-scoring.  Defaults are 0.97 pre-emphasis, 10 ms windows,
50 % overlap and 40 filters.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, InsufficientDataError, InvalidInputError, TooShortError

FEATURE_MAGIC = b"AVGZFBK\x00"
FEATURE_VERSION = 1
STD_EPS = 1e-8


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(f"expected mono samples, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FilterbankConfig:
    pre_emphasis: float = 0.97
    window_ms: float = 10.0
    overlap_ratio: float = 0.5
    n_filters: int = 40
    fft_size: Optional[int] = None  # None: smallest power of two >= window
    log_floor: float = 1e-10
    f_min: float = 0.0
    f_max: Optional[float] = None  # None: Nyquist

    def validate(self, sample_rate: int) -> None:
        if not 0.0 <= self.pre_emphasis < 1.0:
            raise ConfigError(f"pre_emphasis must be in [0, 1), got {self.pre_emphasis}")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise ConfigError(f"overlap_ratio must be in [0, 1), got {self.overlap_ratio}")
        if self.n_filters < 2:
            raise ConfigError("n_filters must be >= 2")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.window_samples(sample_rate) < 1 or self.hop_samples(sample_rate) < 1:
            raise ConfigError("window and hop must cover at least one sample")
        n_fft = self.resolved_fft_size(sample_rate)
        if n_fft & (n_fft - 1) or n_fft < self.window_samples(sample_rate):
            raise ConfigError(f"fft_size {n_fft} must be a power of two >= window length")
        f_max = self.resolved_f_max(sample_rate)
        if not 0.0 <= self.f_min < f_max <= sample_rate / 2:
            raise ConfigError(f"need 0 <= f_min < f_max <= {sample_rate / 2}")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.window_samples(sample_rate) * (1.0 - self.overlap_ratio)))

    def resolved_fft_size(self, sample_rate: int) -> int:
        if self.fft_size is not None:
            return int(self.fft_size)
        w = max(self.window_samples(sample_rate), 1)
        return 1 << (w - 1).bit_length()

    def resolved_f_max(self, sample_rate: int) -> float:
        return sample_rate / 2 if self.f_max is None else float(self.f_max)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class FilterbankFeatures:
    values: np.ndarray
    frame_times: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    eps: float = field(default=STD_EPS)


def _check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{what} contains non-finite values")


def pre_emphasize(clip: AudioClip, coeff: float = 0.97) -> AudioClip:
    """y[0] = x[0]; y[n] = x[n] - coeff * x[n-1]."""
    if not 0.0 <= coeff < 1.0:
        raise InvalidInputError(f"pre-emphasis coefficient must be in [0, 1), got {coeff}")
    x = clip.samples
    y = x.copy()
    y[1:] -= coeff * x[:-1]
    return AudioClip(y, clip.sample_rate)


def num_frames(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def frame_signal(clip: AudioClip, cfg: FilterbankConfig = FilterbankConfig()) -> np.ndarray:
    """Slice into Hamming-windowed frames, shape (T, W)."""
    sr = clip.sample_rate
    w = cfg.window_samples(sr)
    h = cfg.hop_samples(sr)
    n = len(clip)
    if n < w:
        raise TooShortError(f"clip has {n} samples, shorter than one {w}-sample window")
    t = num_frames(n, w, h)
    idx = np.arange(w)[None, :] + h * np.arange(t)[:, None]
    return clip.samples[idx] * np.hamming(w)[None, :]


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise InvalidInputError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise InvalidInputError("mel value must be non-negative")
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(out) if out.ndim == 0 else out


def power_spectrum(frames: np.ndarray, fft_size: int) -> np.ndarray:
    """|DFT|^2 / fft_size over the last axis, zero-padded to ``fft_size``."""
    frames = np.asarray(frames, dtype=np.float64)
    _check_finite(frames, "frame")
    if frames.shape[-1] > fft_size:
        raise InvalidInputError(f"frame length {frames.shape[-1]} exceeds fft_size {fft_size}")
    spec = np.fft.rfft(frames, n=fft_size, axis=-1)
    return (spec.real ** 2 + spec.imag ** 2) / fft_size


def mel_filter_edges(cfg: FilterbankConfig, sample_rate: int) -> np.ndarray:
    """The n_filters + 2 mel-equally-spaced edge frequencies in Hz."""
    lo = hz_to_mel(cfg.f_min)
    hi = hz_to_mel(cfg.resolved_f_max(sample_rate))
    return mel_to_hz(np.linspace(lo, hi, cfg.n_filters + 2))


def mel_filter_centers(cfg: FilterbankConfig, sample_rate: int) -> np.ndarray:
    return mel_filter_edges(cfg, sample_rate)[1:-1]


def mel_filter_matrix(cfg: FilterbankConfig, sample_rate: int) -> np.ndarray:
    """Triangular filters, shape (n_filters, fft_size // 2 + 1).

    Each row is a continuous triangle sampled at the bin frequencies and
    rescaled so that its largest sampled weight is exactly 1.
    """
    cfg.validate(sample_rate)
    n_fft = cfg.resolved_fft_size(sample_rate)
    edges = mel_filter_edges(cfg, sample_rate)
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lo) / (mid - lo)
    falling = (hi - bins[None, :]) / (hi - mid)
    fb = np.clip(np.minimum(rising, falling), 0.0, None)
    peaks = fb.max(axis=1)
    empty = np.flatnonzero(peaks <= 0)
    if empty.size:
        raise ConfigError(
            f"{empty.size} mel filters have no FFT bins in their support "
            f"(first: filter {empty[0]}); reduce n_filters or raise fft_size"
        )
    return fb / peaks[:, None]


def extract_features(clip: AudioClip, cfg: FilterbankConfig = FilterbankConfig()) -> FilterbankFeatures:
    sr = clip.sample_rate
    cfg.validate(sr)
    emphasized = pre_emphasize(clip, cfg.pre_emphasis)
    frames = frame_signal(emphasized, cfg)
    power = power_spectrum(frames, cfg.resolved_fft_size(sr))
    energies = power @ mel_filter_matrix(cfg, sr).T
    values = np.log(np.maximum(energies, cfg.log_floor))
    w, h = cfg.window_samples(sr), cfg.hop_samples(sr)
    times = (np.arange(values.shape[0]) * h + w / 2.0) / sr
    return FilterbankFeatures(values, times)


def fit_norm_stats(features: Iterable, eps: float = STD_EPS) -> NormStats:
    """Per-coefficient mean and (clamped) std over every frame of a corpus."""
    mats = [np.asarray(f.values if isinstance(f, FilterbankFeatures) else f, dtype=np.float64) for f in features]
    mats = [m for m in mats if m.size]
    total = sum(m.shape[0] for m in mats)
    if total < 2:
        raise InsufficientDataError(f"need at least 2 feature frames, got {total}")
    stacked = np.concatenate(mats, axis=0)
    mean = stacked.mean(axis=0)
    const = np.all(stacked == stacked[0], axis=0)
    mean[const] = stacked[0, const]
    std = np.maximum(stacked.std(axis=0), eps)
    return NormStats(mean, std, eps)


def apply_norm(features, stats: NormStats):
    if isinstance(features, FilterbankFeatures):
        return FilterbankFeatures((features.values - stats.mean) / stats.std, features.frame_times)
    return (np.asarray(features, dtype=np.float64) - stats.mean) / stats.std


# --- file formats ----------------------------------------------------------


def read_wav(path) -> AudioClip:
    """Read PCM WAV (16-bit int or 32-bit float); multichannel is averaged."""
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, sr)


def write_wav(path, clip: AudioClip, pcm16: bool = True) -> None:
    if pcm16:
        data = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = clip.samples.astype(np.float32)
    wavfile.write(str(path), clip.sample_rate, data)


def write_features(path, feats: FilterbankFeatures, sample_rate: int, cfg: FilterbankConfig) -> Path:
    """Binary matrix (magic, version, T, n_filters, float32 LE) plus a JSON sidecar."""
    path = Path(path)
    values = np.ascontiguousarray(feats.values, dtype="<f4")
    t, n = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, n))
        fh.write(values.tobytes())
    meta = {
        "version": FEATURE_VERSION,
        "sample_rate": int(sample_rate),
        "config_hash": cfg.digest(),
        "config": asdict(cfg),
        "frame_times": [float(x) for x in feats.frame_times],
    }
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(meta, indent=1, sort_keys=True))
    return sidecar


def read_features(path) -> tuple[FilterbankFeatures, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise InvalidInputError(f"{path}: not a filterbank feature file")
    version, t, n = struct.unpack("<III", raw[8:20])
    if version != FEATURE_VERSION:
        raise InvalidInputError(f"{path}: unsupported feature version {version}")
    values = np.frombuffer(raw[20:], dtype="<f4", count=t * n).reshape(t, n).astype(np.float64)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    times = np.asarray(meta.get("frame_times", np.full(t, np.nan)), dtype=np.float64)
    return FilterbankFeatures(values, times), meta
