"""
Waveform and spectrogram transformations
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window, resample_poly

logger = logging.getLogger(__name__)

ISTFT_EPS = 1e-12
# Normaliser floor relative to its peak; only the single-frame clip edges fall below it
ISTFT_NORM_FLOOR = 1e-2
LOG_DELTA = 1e-4


@dataclass
class Waveform:
    """Mono signal with its sample rate"""
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono (1-D), got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """F×N complex STFT grid; F = window_len // 2 + 1"""
    data: np.ndarray
    window_len: int
    hop: int
    sample_rate: int
    original_len: int

    @property
    def num_bins(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)

    def phase(self) -> np.ndarray:
        return np.angle(self.data)


@dataclass(frozen=True)
class BinMap:
    """Linear-to-log frequency warp.

    ``centers`` are the fractional linear-bin positions sampled by each warped
    row; row r interpolates between linear rows ``lower[r]`` and ``lower[r] + 1``
    with weight ``weights[r]`` on the upper one.
    """
    in_bins: int
    centers: np.ndarray
    lower: np.ndarray
    weights: np.ndarray

    @property
    def out_bins(self) -> int:
        return len(self.centers)


@dataclass
class LogFreqSpectrogram:
    data: np.ndarray
    bin_map: BinMap


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase windowed-sinc resampling to target_rate"""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if len(w) == 0:
        raise ValueError("cannot resample an empty waveform")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)

    ratio = Fraction(int(target_rate), int(w.sample_rate))
    out = resample_poly(w.samples, ratio.numerator, ratio.denominator, padtype="line")
    out_len = int(round(len(w) * target_rate / w.sample_rate))
    if len(out) >= out_len:
        out = out[:out_len]
    else:
        out = np.pad(out, (0, out_len - len(out)))
    return Waveform(out, int(target_rate))


def hann_window(window_len: int) -> np.ndarray:
    """Periodic Hann window"""
    return get_window("hann", window_len, fftbins=True)


def num_frames(length: int, window_len: int, hop: int) -> int:
    return 1 + (length - window_len) // hop


def stft(w: Waveform, window_len: int, hop: int) -> ComplexSpectrogram:
    """Hann-windowed short-time Fourier transform, bins 0..window_len/2"""
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if len(w) < window_len:
        raise ValueError(f"signal has {len(w)} samples; stft needs at least window_len = {window_len}")
    frames = sliding_window_view(w.samples, window_len)[::hop]
    data = scipy.fft.rfft(frames * hann_window(window_len), n=window_len, axis=1).T
    return ComplexSpectrogram(np.ascontiguousarray(data), window_len, hop, w.sample_rate, len(w))


def istft(s: ComplexSpectrogram, target_len: Optional[int] = None) -> Waveform:
    """Weighted overlap-add with window-square normalization"""
    if s.data.size == 0 or s.num_frames == 0:
        raise ValueError("cannot invert an empty spectrogram")
    if s.num_bins != s.window_len // 2 + 1:
        raise ValueError(f"spectrogram has {s.num_bins} bins, window_len {s.window_len} needs {s.window_len // 2 + 1}")
    span = (s.num_frames - 1) * s.hop + s.window_len
    target_len = s.original_len if target_len is None else target_len
    if target_len > span:
        raise ValueError(f"target_len {target_len} exceeds the {span} samples spanned by {s.num_frames} frames")

    window = hann_window(s.window_len)
    frames = scipy.fft.irfft(s.data.T, n=s.window_len, axis=1) * window
    index = (np.arange(s.num_frames)[:, None] * s.hop + np.arange(s.window_len)[None, :]).ravel()
    signal = np.bincount(index, weights=frames.ravel(), minlength=span)
    norm = np.bincount(index, weights=np.tile(window * window, s.num_frames), minlength=span)
    norm = np.maximum(norm, ISTFT_NORM_FLOOR * norm.max())
    return Waveform((signal / (norm + ISTFT_EPS))[:target_len], s.sample_rate)


def log_frequency_map(in_bins: int, out_bins: int) -> BinMap:
    """Geometric bin centers from 2 linear-bin widths up to Nyquist"""
    if out_bins < 2:
        raise ValueError(f"out_bins must be >= 2, got {out_bins}")
    if in_bins < 2:
        raise ValueError(f"need at least 2 linear bins, got {in_bins}")
    f_hi = float(in_bins - 1)
    f_lo = min(2.0, f_hi / 2)
    centers = np.geomspace(f_lo, f_hi, out_bins)
    lower = np.minimum(np.floor(centers).astype(np.int64), in_bins - 2)
    weights = centers - lower
    return BinMap(in_bins, centers, lower, weights)


def warp_log_freq(mag: np.ndarray, out_bins: int, bin_map: Optional[BinMap] = None) -> LogFreqSpectrogram:
    """Resample the frequency axis (axis 0) onto log-spaced centers"""
    if bin_map is None:
        bin_map = log_frequency_map(mag.shape[0], out_bins)
    elif bin_map.in_bins != mag.shape[0] or bin_map.out_bins != out_bins:
        raise ValueError(f"bin map is {bin_map.in_bins}->{bin_map.out_bins}, "
                         f"grid needs {mag.shape[0]}->{out_bins}")
    w = bin_map.weights.reshape((-1,) + (1,) * (mag.ndim - 1))
    a = mag[bin_map.lower]
    b = mag[bin_map.lower + 1]
    return LogFreqSpectrogram(a + w * (b - a), bin_map)


def unwarp_log_freq(warped: LogFreqSpectrogram, out_bins: int) -> np.ndarray:
    """Back to linear frequency; bins below the lowest center copy the lowest warped row"""
    bin_map = warped.bin_map
    if warped.data.shape[0] != bin_map.out_bins:
        raise ValueError(f"warped grid has {warped.data.shape[0]} bins, bin map has {bin_map.out_bins}")
    if out_bins != bin_map.in_bins:
        raise ValueError(f"bin map was built for {bin_map.in_bins} linear bins, asked for {out_bins}")
    positions = np.interp(np.arange(out_bins, dtype=np.float64), bin_map.centers,
                          np.arange(bin_map.out_bins, dtype=np.float64))
    lower = np.minimum(np.floor(positions).astype(np.int64), bin_map.out_bins - 2)
    w = (positions - lower).reshape((-1,) + (1,) * (warped.data.ndim - 1))
    a = warped.data[lower]
    b = warped.data[lower + 1]
    return a + w * (b - a)


def log_compress(mag: np.ndarray) -> np.ndarray:
    """log(1 + mag / delta)"""
    if np.any(mag < 0):
        raise ValueError("log_compress needs nonnegative magnitudes")
    return np.log1p(mag / LOG_DELTA)


def log_expand(y: np.ndarray) -> np.ndarray:
    return LOG_DELTA * np.expm1(y)


def apply_mask(mix: ComplexSpectrogram, mask: np.ndarray) -> ComplexSpectrogram:
    """Scale mixture magnitudes by mask, keeping mixture phase"""
    mask = np.asarray(mask)
    if mask.shape != mix.data.shape:
        raise ValueError(f"mask shape {mask.shape} does not match spectrogram {mix.data.shape}")
    if np.any(mask < 0) or np.any(mask > 1) or not np.all(np.isfinite(mask)):
        raise ValueError("mask entries must lie in [0, 1]")
    return ComplexSpectrogram(mix.data * mask, mix.window_len, mix.hop, mix.sample_rate, mix.original_len)
