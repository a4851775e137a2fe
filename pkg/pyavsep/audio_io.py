"""
File formats: PCM-16 WAV audio, PPM/PNG frames and SPEC1 grid dumps
"""

import logging
import os
import struct
from typing import Optional, Tuple, Union

import numpy as np
import soundfile as sf
from PIL import Image

from .dsp import Waveform, resample

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

PCM_SCALE = 32768.0
SPEC1_MAGIC = b"SPEC1\n"


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Float samples -> int16 with full-scale 1.0 = 32768 (clipped)"""
    return np.clip(np.round(np.asarray(samples) * PCM_SCALE), -32768, 32767).astype(np.int16)


def pcm16_to_float(samples: np.ndarray) -> np.ndarray:
    return np.asarray(samples, dtype=np.float64) / PCM_SCALE


def read_wav(path: PathLike, target_rate: Optional[int] = None) -> Waveform:
    """Read a mono WAV; resample when the file rate differs from target_rate"""
    data, rate = sf.read(os.fspath(path), dtype="int16", always_2d=True)
    if data.shape[1] != 1:
        raise ValueError(f"{path}: expected mono audio, found {data.shape[1]} channels")
    wave = Waveform(pcm16_to_float(data[:, 0]), int(rate))
    if target_rate is not None and wave.sample_rate != target_rate:
        logger.info("resampling %s from %d Hz to %d Hz", path, wave.sample_rate, target_rate)
        wave = resample(wave, target_rate)
    return wave


def write_wav(path: PathLike, wave: Union[Waveform, np.ndarray], sample_rate: Optional[int] = None) -> None:
    """Write mono PCM 16-bit little-endian WAV"""
    if isinstance(wave, Waveform):
        samples, sample_rate = wave.samples, wave.sample_rate
    else:
        samples = wave
    if sample_rate is None:
        raise ValueError("sample_rate is required when writing a raw array")
    samples = np.asarray(samples)
    if samples.dtype != np.int16:
        if np.any(np.abs(samples) > 1.0):
            logger.warning("clipping %s: peak %.3f exceeds full scale", path, float(np.max(np.abs(samples))))
        samples = quantize_pcm16(samples)
    sf.write(os.fspath(path), samples, int(sample_rate), subtype="PCM_16", format="WAV")


def read_frame(path: PathLike) -> np.ndarray:
    """PPM (P6) or PNG -> H×W×3 uint8"""
    with Image.open(os.fspath(path)) as image:
        return np.asarray(image.convert("RGB"), dtype=np.uint8).copy()


def write_frame(path: PathLike, frame: np.ndarray) -> None:
    """H×W×3 uint8 -> file; format follows the extension (.ppm writes P6)"""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3 or frame.dtype != np.uint8:
        raise ValueError(f"frame must be H×W×3 uint8, got {frame.shape} {frame.dtype}")
    Image.fromarray(frame).save(os.fspath(path))


def frame_to_chw(frame: np.ndarray) -> np.ndarray:
    """H×W×3 uint8 -> 3×H×W in [0, 1]"""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3 or frame.dtype != np.uint8:
        raise ValueError(f"frame must be H×W×3 uint8, got {frame.shape} {frame.dtype}")
    return np.transpose(frame, (2, 0, 1)).astype(np.float64) / 255.0


def write_spec1(path: PathLike, magnitude: np.ndarray, phase: Optional[np.ndarray] = None) -> None:
    """magic, u32 F, u32 N, u8 phase flag, F·N f32 magnitude [, F·N f32 phase]"""
    magnitude = np.asarray(magnitude)
    if magnitude.ndim != 2:
        raise ValueError(f"SPEC1 holds a 2-D grid, got shape {magnitude.shape}")
    if phase is not None and np.shape(phase) != magnitude.shape:
        raise ValueError(f"phase shape {np.shape(phase)} does not match magnitude {magnitude.shape}")
    with open(path, "wb") as f:
        f.write(SPEC1_MAGIC)
        f.write(struct.pack("<IIB", magnitude.shape[0], magnitude.shape[1], 0 if phase is None else 1))
        f.write(np.ascontiguousarray(magnitude, dtype="<f4").tobytes())
        if phase is not None:
            f.write(np.ascontiguousarray(phase, dtype="<f4").tobytes())


def read_spec1(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(SPEC1_MAGIC):
        raise ValueError(f"{path}: not a SPEC1 file")
    header_end = len(SPEC1_MAGIC) + struct.calcsize("<IIB")
    if len(data) < header_end:
        raise ValueError(f"{path}: truncated SPEC1 header")
    n_bins, n_frames, has_phase = struct.unpack_from("<IIB", data, len(SPEC1_MAGIC))
    count = n_bins * n_frames
    expected = header_end + 4 * count * (2 if has_phase else 1)
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for a {n_bins}x{n_frames} grid, found {len(data)}")
    magnitude = np.frombuffer(data, dtype="<f4", count=count, offset=header_end).reshape(n_bins, n_frames)
    phase = None
    if has_phase:
        phase = np.frombuffer(data, dtype="<f4", count=count, offset=header_end + 4 * count)
        phase = phase.reshape(n_bins, n_frames)
    return magnitude.astype(np.float64), None if phase is None else phase.astype(np.float64)
