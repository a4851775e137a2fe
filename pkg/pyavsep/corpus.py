"""
Synthetic audiovisual corpus: harmonic timbres paired with coloured glyphs.

Each class has a fundamental range, a harmonic profile and an amplitude
envelope for its sound, and a (shape, colour) glyph for its picture. Clips are
solos (one class) or duets (two classes) with every stem kept on disk, so
per-source ground truth is always available.
"""

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.fft
from tqdm import tqdm

from . import audio_io
from .config import Preset, get_preset
from .dsp import Waveform, log_compress, stft, warp_log_freq

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
ENVELOPES = ("sustained", "plucked", "tremolo")
HARMONIC_CUTOFF = 0.45          # fraction of the sample rate
NOISE_LEVEL_DB = -40.0
STEM_PEAK = 0.5
MIX_PEAK = 0.99
RAMP_SECONDS = 0.02
TREMOLO_HZ = 6.0
BACKGROUND_MAX = 40
PLACEMENT_ATTEMPTS = 100
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class ClassSpec:
    """Timbre and glyph of one sounding-object class"""
    class_id: int
    name: str
    f0_range: Tuple[float, float]
    harmonics: Tuple[float, ...]
    envelope: str
    shape: str
    color: Tuple[int, int, int]

    def __post_init__(self):
        weights = np.asarray(self.harmonics, dtype=np.float64)
        if np.any(weights < 0) or not np.any(weights > 0):
            raise ValueError(f"class {self.name}: harmonic weights must be nonnegative and not all zero")
        if self.envelope not in ENVELOPES:
            raise ValueError(f"class {self.name}: unknown envelope '{self.envelope}'")
        if self.shape not in GLYPHS:
            raise ValueError(f"class {self.name}: unknown glyph shape '{self.shape}'")
        object.__setattr__(self, "harmonics", tuple(float(w) for w in weights / np.sqrt(np.sum(weights ** 2))))


def _glyph_circle(u, v):
    return u * u + v * v <= 1.0


def _glyph_square(u, v):
    return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)


def _glyph_triangle(u, v):
    return (v <= 0.9) & (np.abs(u) <= 0.45 * (v + 1.0))


def _glyph_cross(u, v):
    return ((np.abs(u) <= 0.25) | (np.abs(v) <= 0.25)) & (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9)


def _glyph_diamond(u, v):
    return np.abs(u) + np.abs(v) <= 1.0


def _glyph_ring(u, v):
    r2 = u * u + v * v
    return (r2 >= 0.45) & (r2 <= 1.0)


def _glyph_hbar(u, v):
    return (np.abs(v) <= 0.3) & (np.abs(u) <= 0.95)


def _glyph_xshape(u, v):
    return ((np.abs(u - v) <= 0.3) | (np.abs(u + v) <= 0.3)) & (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9)


GLYPHS = {
    "circle": _glyph_circle,
    "square": _glyph_square,
    "triangle": _glyph_triangle,
    "cross": _glyph_cross,
    "diamond": _glyph_diamond,
    "ring": _glyph_ring,
    "hbar": _glyph_hbar,
    "xshape": _glyph_xshape,
}

CATALOG: Tuple[ClassSpec, ...] = (
    ClassSpec(0, "flute", (440.0, 660.0), (1.0, 0.3, 0.1, 0.05), "sustained", "circle", (230, 40, 40)),
    ClassSpec(1, "violin", (294.0, 392.0), (1.0, 0.6, 0.5, 0.4, 0.3, 0.25, 0.2, 0.15), "tremolo", "square", (40, 220, 60)),
    ClassSpec(2, "guitar", (165.0, 247.0), (1.0, 0.5, 0.33, 0.25, 0.2, 0.16), "plucked", "triangle", (50, 80, 240)),
    ClassSpec(3, "cello", (98.0, 147.0), (1.0, 0.9, 0.7, 0.5, 0.35, 0.25, 0.15, 0.1, 0.05), "sustained", "cross", (240, 220, 40)),
    ClassSpec(4, "trumpet", (233.0, 350.0), (1.0, 1.0, 0.8, 0.6, 0.45, 0.3, 0.2), "sustained", "diamond", (220, 50, 220)),
    ClassSpec(5, "xylophone", (523.0, 784.0), (1.0, 0.0, 0.3, 0.0, 0.1), "plucked", "ring", (40, 220, 230)),
    ClassSpec(6, "clarinet", (147.0, 220.0), (1.0, 0.0, 0.5, 0.0, 0.3, 0.0, 0.15), "tremolo", "hbar", (245, 140, 30)),
    ClassSpec(7, "bass", (55.0, 82.0), (1.0, 0.7, 0.4, 0.2, 0.1), "plucked", "xshape", (235, 235, 235)),
)


def get_classes(num_classes: int) -> Tuple[ClassSpec, ...]:
    if not 1 <= num_classes <= len(CATALOG):
        raise ValueError(f"num_classes must be between 1 and {len(CATALOG)}, got {num_classes}")
    return CATALOG[:num_classes]


# ---------------------------------------------------------------------------
# Audio
# ---------------------------------------------------------------------------

def amplitude_envelope(kind: str, length: int, sample_rate: int) -> np.ndarray:
    """sustained: 20 ms ramps; plucked: short attack then exp(-3t/T); tremolo: 6 Hz AM on sustained"""
    t = np.arange(length) / sample_rate
    duration = length / sample_rate
    ramp = max(1, int(RAMP_SECONDS * sample_rate))
    sustained = np.ones(length)
    rise = np.linspace(0.0, 1.0, min(ramp, length))
    sustained[:len(rise)] = rise
    sustained[length - len(rise):] = np.minimum(sustained[length - len(rise):], rise[::-1])
    if kind == "sustained":
        return sustained
    if kind == "plucked":
        attack = max(1, ramp // 4)
        env = np.exp(-3.0 * t / duration)
        env[:attack] *= np.linspace(0.0, 1.0, attack)
        return env
    if kind == "tremolo":
        return sustained * (1.0 + 0.5 * np.sin(2 * np.pi * TREMOLO_HZ * t)) / 1.5
    raise ValueError(f"unknown envelope '{kind}'")


def pink_noise(length: int, rng: np.random.Generator) -> np.ndarray:
    """1/f-power noise by spectral shaping of white noise, unit RMS"""
    spectrum = scipy.fft.rfft(rng.standard_normal(length))
    freqs = np.arange(len(spectrum), dtype=np.float64)
    freqs[0] = 1.0
    noise = scipy.fft.irfft(spectrum / np.sqrt(freqs), n=length)
    rms = np.sqrt(np.mean(noise ** 2))
    return noise / rms if rms > 0 else noise


def synth_stem(spec: ClassSpec, length: int, sample_rate: int, rng: np.random.Generator) -> Waveform:
    """Harmonic tone at a random f0 in the class range, enveloped, with -40 dB pink noise, peak 0.5"""
    f0 = rng.uniform(*spec.f0_range)
    t = np.arange(length) / sample_rate
    phases = rng.uniform(0.0, 2 * np.pi, size=len(spec.harmonics))
    tone = np.zeros(length)
    for number, (weight, phase) in enumerate(zip(spec.harmonics, phases), start=1):
        if weight == 0.0 or f0 * number >= HARMONIC_CUTOFF * sample_rate:
            continue
        tone += weight * np.sin(2 * np.pi * f0 * number * t + phase)
    tone *= amplitude_envelope(spec.envelope, length, sample_rate)
    tone_rms = np.sqrt(np.mean(tone ** 2))
    signal = tone + pink_noise(length, rng) * tone_rms * 10.0 ** (NOISE_LEVEL_DB / 20.0)
    peak = np.max(np.abs(signal))
    if peak > 0:
        signal = signal * (STEM_PEAK / peak)
    return Waveform(signal, sample_rate)


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

def glyph_mask(shape: str, size: int) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(coords, coords, indexing="ij")
    return GLYPHS[shape](u, v)


def _overlaps(box: Tuple[int, int, int], placed: Sequence[Tuple[int, int, int]]) -> bool:
    y, x, s = box
    for py, px, ps in placed:
        if y < py + ps + 1 and py < y + s + 1 and x < px + ps + 1 and px < x + s + 1:
            return True
    return False


def render_frame(classes: Sequence[int], size: int, rng: np.random.Generator,
                 catalog: Sequence[ClassSpec] = CATALOG) -> np.ndarray:
    """H×W×3 uint8: dark random texture plus one non-overlapping glyph per class"""
    if not 1 <= len(classes) <= 2:
        raise ValueError(f"a frame shows 1 or 2 classes, got {len(classes)}")
    frame = rng.integers(0, BACKGROUND_MAX + 1, size=(size, size, 3)).astype(np.uint8)
    smallest, largest = max(4, size // 5), max(4, size // 3)
    placed: List[Tuple[int, int, int]] = []
    for cls in classes:
        spec = catalog[cls]
        for _ in range(PLACEMENT_ATTEMPTS):
            glyph_size = int(rng.integers(smallest, largest + 1))
            y = int(rng.integers(0, size - glyph_size + 1))
            x = int(rng.integers(0, size - glyph_size + 1))
            if not _overlaps((y, x, glyph_size), placed):
                break
        else:
            raise ValueError(f"could not place glyph for class {cls} without overlap "
                             f"after {PLACEMENT_ATTEMPTS} attempts")
        placed.append((y, x, glyph_size))
        region = frame[y:y + glyph_size, x:x + glyph_size]
        region[glyph_mask(spec.shape, glyph_size)] = spec.color
    return frame


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

@dataclass
class CorpusConfig:
    preset: str = "desk"
    num_classes: int = 4
    solos_per_class: Dict[str, int] = field(default_factory=lambda: {"train": 200, "val": 20, "test": 20})
    duets: Dict[str, int] = field(default_factory=lambda: {"train": 80, "val": 10, "test": 10})
    seed: int = 0

    @property
    def spec(self) -> Preset:
        return get_preset(self.preset)

    def clip_plan(self) -> List[Tuple[str, Optional[int]]]:
        """(split, solo class or None for a duet) per clip index"""
        plan: List[Tuple[str, Optional[int]]] = []
        for split in SPLITS:
            for cls in range(self.num_classes):
                plan.extend((split, cls) for _ in range(self.solos_per_class.get(split, 0)))
            plan.extend((split, None) for _ in range(self.duets.get(split, 0)))
        return plan


@dataclass
class AVSample:
    """One clip: frame, per-class stems, their exact sum and clip-level labels"""
    clip_id: str
    split: str
    labels: Tuple[int, ...]
    frame: np.ndarray
    stems: Dict[int, Waveform]
    mixture: Waveform

    def label_vector(self, num_classes: int) -> np.ndarray:
        vector = np.zeros(num_classes)
        vector[list(self.labels)] = 1.0
        return vector


@dataclass
class ManifestEntry:
    clip_id: str
    split: str
    labels: Tuple[int, ...]
    frame_path: str
    mixture_path: str
    stem_paths: Tuple[str, ...]


def make_sample(index: int, split: str, solo_class: Optional[int], config: CorpusConfig) -> AVSample:
    """Deterministic clip from (seed, index); stems int16-exact and summing to the mixture"""
    spec = config.spec
    rng = np.random.default_rng([config.seed, index])
    if solo_class is None:
        labels = tuple(sorted(int(c) for c in rng.choice(config.num_classes, size=2, replace=False)))
    else:
        labels = (solo_class,)
    raw = [synth_stem(CATALOG[c], spec.clip_len, spec.sample_rate, rng).samples for c in labels]
    peak = np.max(np.abs(np.sum(raw, axis=0)))
    gain = min(1.0, MIX_PEAK / peak) if peak > 0 else 1.0
    quantized = [audio_io.quantize_pcm16(stem * gain) for stem in raw]
    mixture = np.sum([q.astype(np.int32) for q in quantized], axis=0)
    frame = render_frame(labels, spec.frame_size, rng)
    return AVSample(
        clip_id=f"{split}-{index:05d}",
        split=split,
        labels=labels,
        frame=frame,
        stems={c: Waveform(audio_io.pcm16_to_float(q), spec.sample_rate) for c, q in zip(labels, quantized)},
        mixture=Waveform(audio_io.pcm16_to_float(mixture), spec.sample_rate),
    )


def _write_sample(sample: AVSample, out_dir: str) -> ManifestEntry:
    frame_path = os.path.join("frames", f"{sample.clip_id}.ppm")
    mixture_path = os.path.join("audio", f"{sample.clip_id}_mix.wav")
    stem_paths = tuple(os.path.join("audio", f"{sample.clip_id}_stem{c}.wav") for c in sample.labels)
    audio_io.write_frame(os.path.join(out_dir, frame_path), sample.frame)
    audio_io.write_wav(os.path.join(out_dir, mixture_path), sample.mixture)
    for cls, path in zip(sample.labels, stem_paths):
        audio_io.write_wav(os.path.join(out_dir, path), sample.stems[cls])
    return ManifestEntry(sample.clip_id, sample.split, sample.labels, frame_path, mixture_path, stem_paths)


def write_manifest(path: str, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        for e in sorted(entries, key=lambda entry: entry.clip_id):
            writer.writerow([e.clip_id, e.split, ",".join(str(c) for c in e.labels), e.frame_path,
                             e.mixture_path, ";".join(e.stem_paths)])


def read_manifest(path: str) -> List[ManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, row in enumerate(csv.reader(f, delimiter="\t"), start=1):
            if not row:
                continue
            if len(row) != 6:
                raise ValueError(f"{path}:{line_no}: expected 6 tab-separated fields, found {len(row)}")
            clip_id, split, labels, frame_path, mixture_path, stems = row
            if split not in SPLITS:
                raise ValueError(f"{path}:{line_no}: unknown split '{split}'")
            entries.append(ManifestEntry(clip_id, split, tuple(int(c) for c in labels.split(",")),
                                         frame_path, mixture_path, tuple(stems.split(";"))))
    return entries


def load_sample(entry: ManifestEntry, root: str, sample_rate: int) -> AVSample:
    """Read one manifest entry back into memory"""
    if len(entry.labels) != len(entry.stem_paths):
        raise ValueError(f"{entry.clip_id}: {len(entry.labels)} labels but {len(entry.stem_paths)} stems")
    stems = {cls: audio_io.read_wav(os.path.join(root, path), sample_rate)
             for cls, path in zip(entry.labels, entry.stem_paths)}
    return AVSample(
        clip_id=entry.clip_id,
        split=entry.split,
        labels=entry.labels,
        frame=audio_io.read_frame(os.path.join(root, entry.frame_path)),
        stems=stems,
        mixture=audio_io.read_wav(os.path.join(root, entry.mixture_path), sample_rate),
    )


def generate_corpus(config: CorpusConfig, out_dir: str, overwrite: bool = False,
                    workers: int = 1, progress: bool = True) -> List[ManifestEntry]:
    """Write WAV stems and mixtures, PPM frames and manifest.tsv under out_dir"""
    get_classes(config.num_classes)
    if config.num_classes < 2 and any(config.duets.values()):
        raise ValueError("duets need at least 2 classes")
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not overwrite:
        raise ValueError(f"output directory {out_dir} is not empty (pass overwrite to replace it)")
    os.makedirs(os.path.join(out_dir, "audio"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)

    plan = config.clip_plan()
    logger.info("generating %d clips (%d classes, preset %s) in %s",
                len(plan), config.num_classes, config.preset, out_dir)

    def build(index: int) -> ManifestEntry:
        split, solo_class = plan[index]
        return _write_sample(make_sample(index, split, solo_class, config), out_dir)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        entries = list(tqdm(pool.map(build, range(len(plan))), total=len(plan),
                            desc="synth", unit="clip", disable=not progress))
    write_manifest(os.path.join(out_dir, MANIFEST_NAME), entries)
    return entries


def nearest_centroid_accuracy(samples: Sequence[AVSample], spec: Preset) -> float:
    """Leave-one-out nearest-centroid accuracy of solo clips on time-averaged warped log spectra"""
    solos = [s for s in samples if len(s.labels) == 1]
    if not solos:
        raise ValueError("no solo clips to measure")
    profiles = []
    for sample in solos:
        mag = stft(sample.mixture, spec.window_len, spec.hop).magnitude()
        profiles.append(log_compress(warp_log_freq(mag, spec.warped_bins).data).mean(axis=1))
    profiles = np.stack(profiles)
    labels = np.array([s.labels[0] for s in solos])
    classes = np.unique(labels)
    sums = {c: profiles[labels == c].sum(axis=0) for c in classes}
    counts = {c: int(np.sum(labels == c)) for c in classes}
    correct = 0
    for profile, label in zip(profiles, labels):
        best, best_dist = None, np.inf
        for c in classes:
            n = counts[c] - (1 if c == label else 0)
            if n == 0:
                continue
            centroid = (sums[c] - (profile if c == label else 0.0)) / n
            dist = float(np.sum((profile - centroid) ** 2))
            if dist < best_dist:
                best, best_dist = c, dist
        correct += int(best == label)
    return correct / len(solos)
