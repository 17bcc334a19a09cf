"""STFT analysis/synthesis and signal/feature normalization.

Spectrograms are complex arrays laid out ``[channel, frame, frequency]``.
"""
from dataclasses import dataclass, field
import warnings

import numpy as np

__all__ = [
    "StftConfig",
    "Waveform",
    "NormalizationTrace",
    "sqrt_hann",
    "stft",
    "istft",
    "num_frames",
    "normalize_variance",
    "denormalize",
    "feature_stats",
    "feature_normalize",
]

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    window_ms: float = 32.0
    shift_ms: float = 8.0
    dft_size: int | None = None

    def __post_init__(self):
        if self.window % self.shift:
            raise ValueError(f"shift ({self.shift}) must divide window ({self.window})")
        if self.n_fft < self.window:
            raise ValueError("dft_size shorter than the analysis window")

    @property
    def window(self):
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def shift(self):
        return int(round(self.shift_ms * self.sample_rate / 1000))

    @property
    def n_fft(self):
        if self.dft_size is not None:
            return int(self.dft_size)
        return 1 << (self.window - 1).bit_length()

    @property
    def num_bins(self):
        return self.n_fft // 2 + 1


@dataclass
class Waveform:
    """Multichannel real signal, ``samples`` shaped (P, N)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))

    @property
    def channels(self):
        return self.samples.shape[0]

    def __len__(self):
        return self.samples.shape[1]


@dataclass
class NormalizationTrace:
    scale: float
    mode: str = "offline"
    block: int | None = None
    per_block_scales: list = field(default_factory=list)
    silent: bool = False


def sqrt_hann(n):
    """Square root of the periodic Hann window (COLA at 50% and 75% overlap)."""
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n))


def num_frames(num_samples, cfg):
    if num_samples < cfg.window:
        return 0
    return (num_samples - cfg.window) // cfg.shift + 1


def stft(x, cfg):
    """Windowed DFT of every full frame; trailing partial frames are dropped.

    Args:
        x: (P, N) or (N,) real signal
    Returns:
        (P, T, F) complex, T = (N - window) // shift + 1
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    T = num_frames(x.shape[-1], cfg)
    if x.shape[-1] == 0 or T == 0:
        raise ValueError(f"signal too short: {x.shape[-1]} samples < one window ({cfg.window})")
    win = sqrt_hann(cfg.window)
    idx = np.arange(T)[:, None] * cfg.shift + np.arange(cfg.window)[None, :]
    frames = x[:, idx] * win
    return np.fft.rfft(frames, n=cfg.n_fft, axis=-1)


def istft(spec, cfg, out_len=None):
    """Weighted overlap-add inverse of :func:`stft`.

    The overlap-added signal is divided by the accumulated squared-window
    envelope; samples never covered by a frame come back as zero.
    """
    spec = np.asarray(spec)
    squeeze = spec.ndim == 2
    if squeeze:
        spec = spec[None]
    P, T, F = spec.shape
    if F != cfg.num_bins:
        raise ValueError(f"spectrogram has {F} bins, config expects {cfg.num_bins}")
    covered = (T - 1) * cfg.shift + cfg.window if T else 0
    if out_len is None:
        out_len = covered
    if out_len < 0 or (T and out_len > covered + cfg.shift - 1):
        raise ValueError(f"out_len {out_len} exceeds representable length {covered + cfg.shift - 1}")
    win = sqrt_hann(cfg.window)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=-1)[..., : cfg.window] * win
    y = np.zeros((P, max(out_len, covered)))
    env = np.zeros(max(out_len, covered))
    for t in range(T):
        sl = slice(t * cfg.shift, t * cfg.shift + cfg.window)
        y[:, sl] += frames[:, t]
        env[sl] += win**2
    nz = env > 1e-10
    y[:, nz] /= env[nz]
    y = y[:, :out_len]
    return y[0] if squeeze else y


def normalize_variance(x, mode="offline", block=None):
    """Scale a multichannel signal to unit sample variance.

    ``offline`` uses one scalar for the whole signal. ``online`` scales block
    b by 1/std of every sample up to the end of block b, pooled over channels.
    Returns ``(scaled, trace)``; :func:`denormalize` inverts it.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.size == 0:
        raise ValueError("empty signal")
    if mode == "offline":
        var = np.var(x)
        if var == 0:
            warnings.warn("all-zero signal; variance normalization skipped", RuntimeWarning)
            return x.copy(), NormalizationTrace(1.0, "offline", silent=True)
        scale = 1.0 / np.sqrt(var)
        if np.isclose(var, 1.0, rtol=0, atol=1e-12):
            scale = 1.0
        return x * scale, NormalizationTrace(float(scale), "offline")
    if mode != "online":
        raise ValueError(f"unknown normalization mode {mode!r}")
    if not block or block <= 0:
        raise ValueError("online normalization needs block > 0")
    N = x.shape[1]
    out = np.empty_like(x)
    scales = []
    # running sums over all samples seen so far, pooled over channels
    s1 = s2 = 0.0
    count = 0
    silent = False
    for start in range(0, N, block):
        seg = x[:, start : start + block]
        s1 += seg.sum()
        s2 += np.sum(seg * seg)
        count += seg.size
        var = s2 / count - (s1 / count) ** 2
        if var <= 0:
            scale, silent = 1.0, True
        else:
            scale = 1.0 / np.sqrt(var)
        scales.append(float(scale))
        out[:, start : start + block] = seg * scale
    return out, NormalizationTrace(scales[-1], "online", block, scales, silent)


def denormalize(x, trace):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if trace.mode == "offline":
        return x / trace.scale
    out = np.empty_like(x)
    for b, scale in enumerate(trace.per_block_scales):
        sl = slice(b * trace.block, (b + 1) * trace.block)
        out[:, sl] = x[:, sl] / scale
    return out


def feature_stats(spec):
    """Per-frequency std pooled over real and imaginary parts, mean taken as zero."""
    spec = np.asarray(spec)
    pooled = np.abs(spec.reshape(-1, spec.shape[-1])) ** 2
    return np.sqrt(pooled.mean(axis=0) / 2.0)


def feature_normalize(spec, stats=None):
    """Divide real and imaginary parts at each bin by one shared std.

    A single real scalar per frequency leaves every bin's phase untouched.
    """
    spec = np.asarray(spec)
    if stats is None:
        stats = feature_stats(spec)
    stats = np.asarray(stats, dtype=np.float64)
    if np.any(stats < 0):
        raise ValueError("feature std must be non-negative")
    return spec / np.maximum(stats, STD_FLOOR)
