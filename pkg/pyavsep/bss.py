"""
BSS-eval separation metrics (SDR, SIR, SAR).

An estimate is split by least squares into the part explained by filtered
copies of the target reference, the extra part explained by all references
(interference) and the unexplained remainder (artifacts).
"""

import csv
import itertools
import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import scipy.fft
import scipy.linalg
from scipy.signal import fftconvolve

from .dsp import Waveform

logger = logging.getLogger(__name__)

METRIC_CAP_DB = 300.0
DENOMINATOR_FLOOR = 1e-12
DEFAULT_FILTER_LEN = 512

Signal = Union[Waveform, np.ndarray]


class SeparationMetricError(ValueError):
    """Raised when a decomposition or its metrics are undefined"""


@dataclass
class BssDecomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray
    filter_len: int


@dataclass
class SourceMetrics:
    sdr: float
    sir: float
    sar: float


@dataclass
class PairResult:
    """Metrics per reference, matched to estimates[permutation[j]]"""
    metrics: List[SourceMetrics]
    permutation: Tuple[int, ...]


@dataclass
class MetricRow:
    clip_id: str
    source_class: int
    sdr: float
    sir: float
    sar: float
    permutation: str
    class_pair: str = ""


def _as_array(signal: Signal) -> np.ndarray:
    values = signal.samples if isinstance(signal, Waveform) else signal
    return np.asarray(values, dtype=np.float64)


def _stack_references(references: Sequence[Signal], length: int) -> np.ndarray:
    refs = np.stack([_as_array(r) for r in references])
    if refs.ndim != 2 or refs.shape[1] != length:
        raise ValueError(f"references must all have the estimate's length {length}, got shapes "
                         f"{[np.shape(_as_array(r)) for r in references]}")
    return refs


def _gram_blocks(spectra: np.ndarray, n_fft: int, filter_len: int) -> np.ndarray:
    """Block-Toeplitz Gram matrix of all shifted references"""
    count = spectra.shape[0]
    gram = np.zeros((count * filter_len, count * filter_len))
    for i in range(count):
        for j in range(i + 1):
            corr = scipy.fft.irfft(spectra[i] * np.conj(spectra[j]), n=n_fft)
            block = scipy.linalg.toeplitz(np.hstack((corr[0], corr[-1:-filter_len:-1])), r=corr[:filter_len])
            gram[i * filter_len:(i + 1) * filter_len, j * filter_len:(j + 1) * filter_len] = block
            gram[j * filter_len:(j + 1) * filter_len, i * filter_len:(i + 1) * filter_len] = block.T
    return gram


def _solve(gram: np.ndarray, rhs: np.ndarray, filter_len: int) -> np.ndarray:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            if gram.shape[0] == filter_len:
                coeffs = scipy.linalg.solve_toeplitz((gram[:, 0], gram[0, :]), rhs)
            else:
                coeffs = scipy.linalg.solve(gram, rhs, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
        raise SeparationMetricError(
            f"reference Gram matrix is singular or ill-conditioned ({exc}); "
            f"try a smaller filter_len than {filter_len}") from exc
    if not np.all(np.isfinite(coeffs)):
        raise SeparationMetricError(f"projection diverged; try a smaller filter_len than {filter_len}")
    return coeffs


def _project(refs: np.ndarray, spectra: np.ndarray, est_spectrum: np.ndarray,
             n_fft: int, filter_len: int) -> np.ndarray:
    """Least-squares projection of the estimate onto shifted copies of refs, length L + filter_len - 1"""
    gram = _gram_blocks(spectra, n_fft, filter_len)
    rhs = np.concatenate([
        scipy.fft.irfft(np.conj(spectra[i]) * est_spectrum, n=n_fft)[:filter_len]
        for i in range(refs.shape[0])
    ])
    coeffs = _solve(gram, rhs, filter_len).reshape(refs.shape[0], filter_len)
    projection = np.zeros(refs.shape[1] + filter_len - 1)
    for ref, taps in zip(refs, coeffs):
        projection += fftconvolve(ref, taps)
    return projection


def bss_decompose(estimate: Signal, references: Sequence[Signal], target_idx: int,
                  filter_len: int = DEFAULT_FILTER_LEN) -> BssDecomposition:
    """Split an estimate into target, interference and artifact components"""
    est = _as_array(estimate)
    if filter_len < 1:
        raise ValueError(f"filter_len must be >= 1, got {filter_len}")
    if not references:
        raise ValueError("need at least one reference")
    refs = _stack_references(references, len(est))
    if not 0 <= target_idx < len(refs):
        raise ValueError(f"target_idx {target_idx} outside {len(refs)} references")

    padded_len = len(est) + filter_len - 1
    n_fft = scipy.fft.next_fast_len(padded_len)
    spectra = scipy.fft.rfft(refs, n=n_fft, axis=1)
    est_spectrum = scipy.fft.rfft(est, n=n_fft)

    s_target = _project(refs[target_idx:target_idx + 1], spectra[target_idx:target_idx + 1],
                        est_spectrum, n_fft, filter_len)
    p_all = _project(refs, spectra, est_spectrum, n_fft, filter_len) if len(refs) > 1 else s_target
    est_padded = np.pad(est, (0, filter_len - 1))
    return BssDecomposition(s_target, p_all - s_target, est_padded - p_all, filter_len)


def _ratio_db(numerator: float, denominator: float, floor: float) -> float:
    if denominator <= floor:
        return METRIC_CAP_DB
    return float(min(10.0 * np.log10(numerator / denominator), METRIC_CAP_DB))


def metrics(d: BssDecomposition) -> SourceMetrics:
    """(SDR, SIR, SAR) in dB, capped at +300 dB"""
    target_energy = float(np.sum(d.s_target ** 2))
    if target_energy <= 0.0:
        raise SeparationMetricError("estimate has no projection onto the target reference")
    floor = DENOMINATOR_FLOOR * target_energy
    interf = float(np.sum(d.e_interf ** 2))
    artif = float(np.sum(d.e_artif ** 2))
    distortion = float(np.sum((d.e_interf + d.e_artif) ** 2))
    explained = float(np.sum((d.s_target + d.e_interf) ** 2))
    return SourceMetrics(
        sdr=_ratio_db(target_energy, distortion, floor),
        sir=_ratio_db(target_energy, interf, floor),
        sar=_ratio_db(explained, artif, floor),
    )


def evaluate_pair(estimates: Sequence[Signal], references: Sequence[Signal],
                  filter_len: int = DEFAULT_FILTER_LEN) -> PairResult:
    """Best assignment of estimates to references by mean SIR (exhaustive)"""
    if len(estimates) != len(references):
        raise ValueError(f"{len(estimates)} estimates for {len(references)} references")
    if not estimates:
        raise ValueError("need at least one estimate")
    count = len(references)
    table = [[metrics(bss_decompose(estimates[i], references, j, filter_len)) for j in range(count)]
             for i in range(count)]
    best_perm, best_score = None, -np.inf
    for perm in itertools.permutations(range(count)):
        score = np.mean([table[perm[j]][j].sir for j in range(count)])
        if score > best_score:
            best_perm, best_score = perm, score
    return PairResult([table[best_perm[j]][j] for j in range(count)], tuple(best_perm))


def mixture_baseline(mixture: Signal, references: Sequence[Signal],
                     filter_len: int = DEFAULT_FILTER_LEN) -> PairResult:
    """Score the unprocessed mixture as the estimate of every source"""
    return evaluate_pair([mixture] * len(references), references, filter_len)


def write_metric_rows(path: str, rows: Sequence[MetricRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["clip_id", "source_class", "SDR", "SIR", "SAR", "permutation"])
        for row in rows:
            writer.writerow([row.clip_id, row.source_class, f"{row.sdr:.4f}", f"{row.sir:.4f}",
                             f"{row.sar:.4f}", row.permutation])


def mean_metrics(rows: Sequence[MetricRow]) -> Dict[str, float]:
    if not rows:
        return {"count": 0, "SDR": float("nan"), "SIR": float("nan"), "SAR": float("nan")}
    return {
        "count": len(rows),
        "SDR": float(np.nanmean([r.sdr for r in rows])),
        "SIR": float(np.nanmean([r.sir for r in rows])),
        "SAR": float(np.nanmean([r.sar for r in rows])),
    }


def class_pair_summary(rows: Sequence[MetricRow]) -> "OrderedDict[str, Dict[str, float]]":
    """Mean metrics per class pair, pairs sorted by name"""
    groups: Dict[str, List[MetricRow]] = {}
    for row in rows:
        groups.setdefault(row.class_pair, []).append(row)
    return OrderedDict((pair, mean_metrics(groups[pair])) for pair in sorted(groups))


def write_summary(path: str, summary: Dict[str, Dict[str, float]], key_name: str = "model") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([key_name, "count", "SDR", "SIR", "SAR"])
        for key, values in summary.items():
            writer.writerow([key, values["count"], f"{values['SDR']:.4f}", f"{values['SIR']:.4f}",
                             f"{values['SAR']:.4f}"])
