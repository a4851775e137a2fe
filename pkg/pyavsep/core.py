"""
Core PyAVSep functionality - mix-and-separate training, separation and evaluation
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import bss
from . import tensor as T
from .audio_io import frame_to_chw, read_frame, read_wav, write_spec1, write_wav
from .config import TrainConfig
from .corpus import (MANIFEST_NAME, AVSample, CorpusConfig, ManifestEntry, generate_corpus, load_sample,
                     read_manifest)
from .dsp import LogFreqSpectrogram, Waveform, apply_mask, istft, log_frequency_map, stft, unwarp_log_freq, warp_log_freq
from .fusion import SpectrogramMask, gt_mask, separation_loss
from .model import AVSeparationModel, load_model, save_model
from .tensor import SGD, CheckpointError, NonFiniteError, Tensor
from .vision import VisionOutput, c_loss, class_probabilities, detect_objects

logger = logging.getLogger(__name__)

TAU_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5)
PAIR_RETRIES = 100


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces NaN or Inf"""


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

class AVDataset:
    """Corpus directory indexed by its manifest; clips load lazily and stay cached"""

    def __init__(self, root: str, sample_rate: int):
        manifest = os.path.join(root, MANIFEST_NAME)
        if not os.path.exists(manifest):
            raise FileNotFoundError(f"no {MANIFEST_NAME} in {root} (run 'pyavsep synth' first)")
        self.root = root
        self.sample_rate = sample_rate
        self.entries: List[ManifestEntry] = read_manifest(manifest)
        self._cache: Dict[str, AVSample] = {}

    def __len__(self):
        return len(self.entries)

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def sample(self, entry: ManifestEntry) -> AVSample:
        if entry.clip_id not in self._cache:
            self._cache[entry.clip_id] = load_sample(entry, self.root, self.sample_rate)
        return self._cache[entry.clip_id]

    def samples(self, split: str) -> List[AVSample]:
        return [self.sample(e) for e in self.split(split)]


@dataclass
class MixedItem:
    """Two class-disjoint clips mixed with one joint gain"""
    clips: Tuple[AVSample, AVSample]
    objects: List[Tuple[int, int]]   # (clip slot, class id), one per stem
    stems: List[Waveform]            # gain applied, aligned with objects
    mixture: Waveform                # exact sum of stems
    gain: float

    @property
    def frames(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.clips[0].frame, self.clips[1].frame

    @property
    def class_pair(self) -> str:
        return "+".join(str(c) for c in sorted(c for _, c in self.objects))

    @property
    def pair_id(self) -> str:
        return f"{self.clips[0].clip_id}+{self.clips[1].clip_id}"

    def classes_in_slot(self, slot: int) -> List[int]:
        return [c for s, c in self.objects if s == slot]


def make_mixed_item(first: AVSample, second: AVSample) -> MixedItem:
    if set(first.labels) & set(second.labels):
        raise ValueError(f"clips {first.clip_id} and {second.clip_id} share a class")
    objects = [(slot, cls) for slot, clip in enumerate((first, second)) for cls in clip.labels]
    raw = [(first, second)[slot].stems[cls].samples for slot, cls in objects]
    peak = float(np.max(np.abs(np.sum(raw, axis=0))))
    gain = min(1.0, 1.0 / peak) if peak > 0 else 1.0
    rate = first.mixture.sample_rate
    stems = [Waveform(r * gain, rate) for r in raw]
    mixture = Waveform(np.sum([s.samples for s in stems], axis=0), rate)
    return MixedItem((first, second), objects, stems, mixture, gain)


def sample_mix_pair(samples: Sequence[AVSample], rng: np.random.Generator, duet_fraction: float = 0.0,
                    retries: int = PAIR_RETRIES) -> MixedItem:
    """Draw two distinct clips whose class sets are disjoint and mix them"""
    if len(samples) < 2:
        raise ValueError(f"need at least 2 clips to mix, split has {len(samples)}")
    solos = [i for i, s in enumerate(samples) if len(s.labels) == 1]
    duets = [i for i, s in enumerate(samples) if len(s.labels) > 1]
    for _ in range(retries):
        picks = []
        for _slot in range(2):
            use_duet = bool(duets) and rng.random() < duet_fraction
            pool = duets if use_duet or not solos else solos
            picks.append(pool[int(rng.integers(len(pool)))])
        if picks[0] == picks[1]:
            continue
        first, second = samples[picks[0]], samples[picks[1]]
        if set(first.labels) & set(second.labels):
            continue
        return make_mixed_item(first, second)
    raise ValueError(f"no class-disjoint pair found after {retries} draws")


@dataclass
class MixedBatch:
    """Network-ready arrays for B mixed items; frames are ordered 2*b + slot"""
    items: List[MixedItem]
    frames: np.ndarray        # 2B×3×S×S
    labels: np.ndarray        # 2B×|C|
    log_specs: np.ndarray     # B×F'×N
    objects: List[Tuple[int, int, int]]   # (frame index, class id, mixture index)
    gt: SpectrogramMask       # K×F'×N, aligned with objects


def prepare_batch(model: AVSeparationModel, items: Sequence[MixedItem], mask_kind: str) -> MixedBatch:
    num_classes = model.config.num_classes
    frames, labels, log_specs, objects, masks = [], [], [], [], []
    for b, item in enumerate(items):
        for slot, clip in enumerate(item.clips):
            frames.append(frame_to_chw(clip.frame))
            labels.append(clip.label_vector(num_classes))
        log_specs.append(model.audio_features(item.mixture)[1])
        mags = [model.warped_magnitude(stem) for stem in item.stems]
        for j, (slot, cls) in enumerate(item.objects):
            objects.append((2 * b + slot, cls, b))
            masks.append(gt_mask(mask_kind, j, mags).values)
    return MixedBatch(list(items), np.stack(frames), np.stack(labels), np.stack(log_specs),
                      objects, SpectrogramMask(np.stack(masks), mask_kind))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    c_loss_1: float
    c_loss_2: float
    sep_loss: float
    total: float
    val_sep_loss: Optional[float] = None


def forward_losses(model: AVSeparationModel, batch: MixedBatch, config: TrainConfig) -> Dict[str, Tensor]:
    """c-loss of each clip slot, separation loss and total = sep + λ(c1 + c2)"""
    vision_out = model.vision_forward(batch.frames)
    first = list(range(0, len(batch.frames), 2))
    second = list(range(1, len(batch.frames), 2))
    c1 = c_loss(T.take(vision_out.scores, first), batch.labels[first])
    c2 = c_loss(T.take(vision_out.scores, second), batch.labels[second])
    unet_out = model.audio_forward(batch.log_specs)
    objects = model.object_logits(vision_out, unet_out, batch.objects)
    sep = separation_loss(objects.logits, batch.gt, config.mask_kind)
    total = sep + config.lambda_cls * (c1 + c2)
    return {"c_loss_1": c1, "c_loss_2": c2, "sep_loss": sep, "total": total}


def _dump_divergence(model: AVSeparationModel, batch: MixedBatch, dump_dir: str, step: int) -> str:
    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, f"diverged_step{step:06d}.npz")
    arrays = {f"param/{name}": values for name, values in model.state().items()}
    grads = {f"grad/{name}": t.grad for name, t in model.params.items() if t.grad is not None}
    np.savez(path, frames=batch.frames, log_specs=batch.log_specs, gt=batch.gt.values, **arrays, **grads)
    return path


def train_step(model: AVSeparationModel, optimizer: SGD, batch: MixedBatch, config: TrainConfig,
               step: int = 0, dump_dir: str = ".") -> LossReport:
    """One SGD step on the combined objective; returns the pre-step losses"""
    model.train()
    try:
        losses = forward_losses(model, batch, config)
        report = LossReport(*(losses[k].item() for k in ("c_loss_1", "c_loss_2", "sep_loss", "total")))
        optimizer.zero_grad()
        losses["total"].backward()
    except NonFiniteError as exc:
        path = _dump_divergence(model, batch, dump_dir, step)
        raise TrainingDivergedError(f"training diverged at step {step}: {exc}; tensors dumped to {path}") from exc
    optimizer.step()
    return report


def evaluate_losses(model: AVSeparationModel, batch: MixedBatch, config: TrainConfig) -> LossReport:
    was_training = model.training
    model.eval()
    losses = forward_losses(model, batch, config)
    model.training = was_training
    return LossReport(*(losses[k].item() for k in ("c_loss_1", "c_loss_2", "sep_loss", "total")))


def write_train_log(path: str, history: Sequence[LossReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "c_loss_1", "c_loss_2", "sep_loss", "total", "val_sep_loss"])
        for step, r in enumerate(history, start=1):
            writer.writerow([step, f"{r.c_loss_1:.6f}", f"{r.c_loss_2:.6f}", f"{r.sep_loss:.6f}", f"{r.total:.6f}",
                             "" if r.val_sep_loss is None else f"{r.val_sep_loss:.6f}"])


def seen_samples(samples: Sequence[AVSample], held_out: Sequence[int]) -> List[AVSample]:
    """Clips containing none of the held-out classes"""
    held = set(held_out)
    return [s for s in samples if not held & set(s.labels)]


def train_model(model: AVSeparationModel, dataset: AVDataset, config: TrainConfig,
                progress: bool = True) -> List[LossReport]:
    """Mix-and-separate training; writes train_log.csv into the output directory"""
    train = seen_samples(dataset.samples("train"), config.held_out_classes)
    val = seen_samples(dataset.samples("val"), config.held_out_classes)
    if config.held_out_classes:
        logger.info("holding out classes %s: %d training clips left", list(config.held_out_classes), len(train))
    rng = np.random.default_rng([config.seed, 3])
    optimizer = SGD(model.params, config.learning_rate, config.momentum, config.weight_decay)
    os.makedirs(config.output_dir, exist_ok=True)

    val_batch = None
    if len(val) >= 2:
        val_rng = np.random.default_rng([config.seed, 4])
        val_items = [sample_mix_pair(val, val_rng, config.eval_duet_fraction) for _ in range(config.batch_size)]
        val_batch = prepare_batch(model, val_items, config.mask_kind)

    history: List[LossReport] = []
    bar = tqdm(range(1, config.steps + 1), desc="train", unit="step", disable=not progress)
    for step in bar:
        items = [sample_mix_pair(train, rng, config.train_duet_fraction) for _ in range(config.batch_size)]
        report = train_step(model, optimizer, prepare_batch(model, items, config.mask_kind), config,
                            step, config.output_dir)
        if step % config.log_every == 0 or step == config.steps:
            if val_batch is not None:
                report.val_sep_loss = evaluate_losses(model, val_batch, config).sep_loss
            logger.info("step %d: c1 %.4f c2 %.4f sep %.4f total %.4f val_sep %s", step, report.c_loss_1,
                        report.c_loss_2, report.sep_loss, report.total,
                        "-" if report.val_sep_loss is None else f"{report.val_sep_loss:.4f}")
            bar.set_postfix(total=f"{report.total:.4f}")
        history.append(report)
    write_train_log(os.path.join(config.output_dir, "train_log.csv"), history)
    model.eval()
    return history


def checkpoint_io(model: AVSeparationModel, path: str, direction: str) -> str:
    """Save or load model weights; loading validates every name and shape"""
    if direction == "save":
        save_model(model, path)
        return "saved"
    if direction == "load":
        if not os.path.exists(path):
            raise FileNotFoundError(f"checkpoint {path} not found")
        model.load_state(T.load_checkpoint(path))
        return "loaded"
    raise ValueError(f"direction must be 'save' or 'load', got '{direction}'")


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass
class SeparatedSource:
    frame_index: int
    class_id: int
    waveform: Waveform
    warped_mask: np.ndarray
    linear_mask: np.ndarray


@dataclass
class SeparationResult:
    sources: List[SeparatedSource]
    status: str                          # "ok" or "no_objects"
    vision: Optional[VisionOutput] = None
    bases: Optional[np.ndarray] = None   # k×F'×N for the mixture


def separate(model: AVSeparationModel, frames: Union[np.ndarray, Sequence[np.ndarray]], mixture: Waveform,
             tau: float, class_ids: Optional[Sequence] = None) -> SeparationResult:
    """Detect objects in the frame(s) and mask the mixture once per object.

    With ``class_ids`` detection is skipped: a flat list of ids for a single
    frame, or one list per frame.
    """
    single = isinstance(frames, np.ndarray) and frames.ndim == 3
    frame_list = [frames] if single else list(frames)
    model.eval()
    vision_out = model.vision_forward(np.stack([frame_to_chw(f) for f in frame_list]))
    if class_ids is None:
        per_frame = [detect_objects(vision_out.scores.values[i], tau) for i in range(len(frame_list))]
    elif single:
        per_frame = [list(class_ids)]
    else:
        per_frame = [list(ids) for ids in class_ids]
    objects = [(f, int(c), 0) for f, ids in enumerate(per_frame) for c in ids]
    if not objects:
        logger.warning("no class reached tau=%.2f; nothing to separate", tau)
        return SeparationResult([], "no_objects", vision_out)

    spectrogram, log_spec = model.audio_features(mixture)
    unet_out = model.audio_forward(log_spec[None])
    warped_masks = T.sigmoid(model.object_logits(vision_out, unet_out, objects).logits).values
    sources = []
    for (frame_index, cls, _), warped in zip(objects, warped_masks):
        warped = warped.astype(np.float64)
        linear = unwarp_log_freq(LogFreqSpectrogram(warped, model.bin_map), spectrogram.num_bins)
        linear = np.clip(linear, 0.0, 1.0)
        wave = istft(apply_mask(spectrogram, linear), len(mixture))
        sources.append(SeparatedSource(frame_index, cls, wave, warped, linear))
    return SeparationResult(sources, "ok", vision_out, unet_out.bases.values[0])


def dump_separation(result: SeparationResult, out_dir: str) -> List[str]:
    """WAV per object plus SPEC1 dumps of masks, attention channels and bases"""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for source in result.sources:
        stem = f"frame{source.frame_index}_class{source.class_id}"
        paths = (os.path.join(out_dir, f"{stem}.wav"),
                 os.path.join(out_dir, f"{stem}_mask.spec"),
                 os.path.join(out_dir, f"{stem}_mask_warped.spec"))
        write_wav(paths[0], source.waveform)
        write_spec1(paths[1], source.linear_mask)
        write_spec1(paths[2], source.warped_mask)
        written.extend(paths)
    if result.vision is not None:
        combined = result.vision.combined.values
        for f in range(combined.shape[0]):
            for c in range(combined.shape[1]):
                path = os.path.join(out_dir, f"attention_frame{f}_class{c}.spec")
                write_spec1(path, combined[f, c])
                written.append(path)
    if result.bases is not None:
        for j, basis in enumerate(result.bases):
            path = os.path.join(out_dir, f"basis{j:02d}.spec")
            write_spec1(path, basis)
            written.append(path)
    return written


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class SeparationReport:
    rows: Dict[str, List[bss.MetricRow]] = field(default_factory=dict)
    detection_recall: Dict[str, float] = field(default_factory=dict)
    false_positives: Dict[str, int] = field(default_factory=dict)

    def summary(self) -> Dict[str, Dict[str, float]]:
        return {key: bss.mean_metrics(rows) for key, rows in self.rows.items()}


def _score(item: MixedItem, estimates: Sequence[Waveform], clip_id: str, filter_len: int) -> List[bss.MetricRow]:
    try:
        result = bss.evaluate_pair(estimates, item.stems, filter_len)
    except bss.SeparationMetricError as exc:
        logger.warning("%s: metrics undefined (%s)", clip_id, exc)
        return [bss.MetricRow(clip_id, cls, np.nan, np.nan, np.nan, "", item.class_pair) for _, cls in item.objects]
    permutation = " ".join(str(p) for p in result.permutation)
    return [bss.MetricRow(clip_id, cls, m.sdr, m.sir, m.sar, permutation, item.class_pair)
            for (_, cls), m in zip(item.objects, result.metrics)]


def _estimates_for(item: MixedItem, result: SeparationResult) -> Tuple[List[Waveform], int, int]:
    """One estimate per ground-truth object; missed objects get the mixture"""
    found = {(s.frame_index, s.class_id): s.waveform for s in result.sources}
    estimates = [found.get((slot, cls), item.mixture) for slot, cls in item.objects]
    detected = sum(1 for key in item.objects if key in found)
    return estimates, detected, len(found) - detected


def evaluation_pairs(samples: Sequence[AVSample], config: TrainConfig) -> List[MixedItem]:
    """Test mixtures, fixed by the seed so every model sees the same pairs"""
    if not samples:
        raise ValueError("evaluation split is empty")
    rng = np.random.default_rng([config.seed, 5])
    return [sample_mix_pair(samples, rng, config.eval_duet_fraction) for _ in range(config.eval_pairs)]


def _add_held_out_rows(report: SeparationReport, held_out: Sequence[int]) -> None:
    held = set(held_out)
    for key in list(report.rows):
        report.rows[f"{key}/held_out"] = [r for r in report.rows[key] if r.source_class in held]
    if not report.rows["mixture/held_out"]:
        logger.warning("no evaluation pair contains held-out classes %s", sorted(held))


def evaluate_separation(models: Dict[str, AVSeparationModel], samples: Sequence[AVSample], config: TrainConfig,
                        progress: bool = True, held_out: Optional[Sequence[int]] = None) -> SeparationReport:
    """Mixture baseline plus protocol (ground-truth classes) and deployment (tau detection) modes per model.

    With held-out classes (from the config unless given) every key also gets a
    ``<key>/held_out`` row set restricted to sources of those classes.
    """
    held_out = config.held_out_classes if held_out is None else held_out
    pairs = evaluation_pairs(samples, config)
    report = SeparationReport(rows={"mixture": []})
    totals = {name: [0, 0, 0] for name in models}
    for name in models:
        report.rows[f"{name}/protocol"] = []
        report.rows[f"{name}/deployment"] = []

    for i, item in enumerate(tqdm(pairs, desc="eval-sep", unit="pair", disable=not progress)):
        clip_id = f"{i:04d}:{item.pair_id}"
        report.rows["mixture"] += _score(item, [item.mixture] * len(item.stems), clip_id, config.filter_len)
        gt_classes = [item.classes_in_slot(0), item.classes_in_slot(1)]
        for name, model in models.items():
            protocol = separate(model, list(item.frames), item.mixture, config.tau, class_ids=gt_classes)
            estimates, _, _ = _estimates_for(item, protocol)
            report.rows[f"{name}/protocol"] += _score(item, estimates, clip_id, config.filter_len)

            deployment = separate(model, list(item.frames), item.mixture, config.tau)
            estimates, detected, spurious = _estimates_for(item, deployment)
            totals[name][0] += detected
            totals[name][1] += len(item.objects)
            totals[name][2] += spurious
            report.rows[f"{name}/deployment"] += _score(item, estimates, clip_id, config.filter_len)

    for name, (detected, total, spurious) in totals.items():
        report.detection_recall[name] = detected / total if total else float("nan")
        report.false_positives[name] = spurious
    if held_out:
        _add_held_out_rows(report, held_out)
    return report


def write_separation_report(report: SeparationReport, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for key, rows in report.rows.items():
        tag = key.replace("/", "_")
        path = os.path.join(out_dir, f"sep_{tag}.csv")
        bss.write_metric_rows(path, rows)
        pairs_path = os.path.join(out_dir, f"sep_pairs_{tag}.csv")
        bss.write_summary(pairs_path, bss.class_pair_summary(rows), key_name="class_pair")
        written += [path, pairs_path]
    summary_path = os.path.join(out_dir, "sep_summary.csv")
    bss.write_summary(summary_path, report.summary())
    written.append(summary_path)
    if report.detection_recall:
        recall_path = os.path.join(out_dir, "detection_recall.csv")
        with open(recall_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["model", "recall", "false_positives"])
            for name, recall in report.detection_recall.items():
                writer.writerow([name, f"{recall:.4f}", report.false_positives[name]])
        written.append(recall_path)
    return written


def evaluate_classification(models: Dict[str, AVSeparationModel], samples: Sequence[AVSample],
                            taus: Sequence[float] = TAU_SWEEP, chunk: int = 32) -> Dict[str, Dict[float, float]]:
    """Exact-match multi-label accuracy per tau"""
    if not samples:
        raise ValueError("evaluation split is empty")
    table: Dict[str, Dict[float, float]] = {}
    for name, model in models.items():
        model.eval()
        probs = []
        for start in range(0, len(samples), chunk):
            frames = np.stack([frame_to_chw(s.frame) for s in samples[start:start + chunk]])
            probs.append(class_probabilities(model.vision_forward(frames).scores))
        probs = np.concatenate(probs)
        table[name] = {}
        for tau in taus:
            hits = [set(np.flatnonzero(p >= tau).tolist()) == set(s.labels) for p, s in zip(probs, samples)]
            table[name][tau] = float(np.mean(hits))
    return table


def write_classification_table(path: str, table: Dict[str, Dict[float, float]]) -> None:
    taus = sorted({tau for row in table.values() for tau in row})
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["model"] + [f"{tau:g}" for tau in taus])
        for name, row in table.items():
            writer.writerow([name] + [f"{row[tau]:.4f}" for tau in taus])


def oracle(samples: Sequence[AVSample], config: TrainConfig, progress: bool = True) -> SeparationReport:
    """Ideal binary/ratio masks, the same passed through the log-frequency warp, and the mixture baseline"""
    spec = config.spec
    bin_map = log_frequency_map(spec.linear_bins, spec.warped_bins)
    report = SeparationReport(rows={key: [] for key in ("mixture", "ibm", "irm", "ibm_warped", "irm_warped")})
    for i, item in enumerate(tqdm(evaluation_pairs(samples, config), desc="oracle", unit="pair",
                                  disable=not progress)):
        clip_id = f"{i:04d}:{item.pair_id}"
        mix_spec = stft(item.mixture, spec.window_len, spec.hop)
        mags = [stft(s, spec.window_len, spec.hop).magnitude() for s in item.stems]
        warped = [warp_log_freq(m, spec.warped_bins, bin_map).data for m in mags]
        report.rows["mixture"] += _score(item, [item.mixture] * len(item.stems), clip_id, config.filter_len)
        for kind, prefix in (("binary", "ibm"), ("ratio", "irm")):
            linear_est, warped_est = [], []
            for j in range(len(mags)):
                mask = gt_mask(kind, j, mags).values
                linear_est.append(istft(apply_mask(mix_spec, mask), len(item.mixture)))
                unwarped = unwarp_log_freq(LogFreqSpectrogram(gt_mask(kind, j, warped).values, bin_map),
                                           spec.linear_bins)
                warped_est.append(istft(apply_mask(mix_spec, np.clip(unwarped, 0.0, 1.0)), len(item.mixture)))
            report.rows[prefix] += _score(item, linear_est, clip_id, config.filter_len)
            report.rows[f"{prefix}_warped"] += _score(item, warped_est, clip_id, config.filter_len)
    return report


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

class PyAVSep:
    """Main PyAVSep class tying corpus, model, training and evaluation together"""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.dataset: Optional[AVDataset] = None
        T.set_precision(config.precision)

    def synthesize(self, out_dir: Optional[str] = None, overwrite: bool = False, workers: int = 1,
                   corpus_config: Optional[CorpusConfig] = None, progress: bool = True) -> List[ManifestEntry]:
        """Generate the synthetic corpus"""
        corpus_config = corpus_config or CorpusConfig(self.config.preset, self.config.num_classes,
                                                      seed=self.config.seed)
        return generate_corpus(corpus_config, out_dir or self.config.corpus_dir, overwrite, workers, progress)

    def load_dataset(self) -> AVDataset:
        """Open the corpus named by the config"""
        if self.dataset is None:
            self.dataset = AVDataset(self.config.corpus_dir, self.config.spec.sample_rate)
        return self.dataset

    def build_model(self) -> AVSeparationModel:
        return AVSeparationModel(self.config)

    def train(self, progress: bool = True) -> Tuple[AVSeparationModel, List[LossReport]]:
        """Train from scratch and save the checkpoint with its config sidecar"""
        model = self.build_model()
        history = train_model(model, self.load_dataset(), self.config, progress)
        save_model(model, self.config.checkpoint)
        return model, history

    def load_models(self, checkpoints: Dict[str, str]) -> Dict[str, AVSeparationModel]:
        models = {}
        for name, path in checkpoints.items():
            model = load_model(path)
            if model.config.preset != self.config.preset:
                raise CheckpointError(f"checkpoint {path} uses preset '{model.config.preset}', "
                                      f"this run uses '{self.config.preset}'")
            models[name] = model
        return models

    def separate_files(self, checkpoint: str, frame_paths: Sequence[str], mixture_path: str,
                       out_dir: str, tau: Optional[float] = None) -> SeparationResult:
        """Separate one mixture WAV given one or more frame images; write stems and dumps"""
        model = load_model(checkpoint)
        frames = [read_frame(p) for p in frame_paths]
        mixture = read_wav(mixture_path, model.spec.sample_rate)
        result = separate(model, frames, mixture, self.config.tau if tau is None else tau)
        dump_separation(result, out_dir)
        return result

    def evaluate_separation(self, checkpoints: Dict[str, str], progress: bool = True) -> SeparationReport:
        """Held-out rows follow the run config, else the classes the checkpoints were trained without"""
        models = self.load_models(checkpoints)
        held_out = self.config.held_out_classes or sorted({c for m in models.values()
                                                           for c in m.config.held_out_classes})
        report = evaluate_separation(models, self.load_dataset().samples("test"), self.config, progress, held_out)
        write_separation_report(report, self.config.output_dir)
        return report

    def evaluate_classification(self, checkpoints: Dict[str, str],
                                taus: Sequence[float] = TAU_SWEEP) -> Dict[str, Dict[float, float]]:
        models = self.load_models(checkpoints)
        table = evaluate_classification(models, self.load_dataset().samples("test"), taus)
        os.makedirs(self.config.output_dir, exist_ok=True)
        write_classification_table(os.path.join(self.config.output_dir, "classification.csv"), table)
        return table

    def oracle(self, progress: bool = True) -> SeparationReport:
        report = oracle(self.load_dataset().samples("test"), self.config, progress)
        out_dir = os.path.join(self.config.output_dir, "oracle")
        write_separation_report(report, out_dir)
        return report
