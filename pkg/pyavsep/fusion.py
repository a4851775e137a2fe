"""
Audio-visual fusion, mask composition from shared bases, ground-truth masks
and separation losses
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import LayerParams, ShapeError, Tensor

logger = logging.getLogger(__name__)

RATIO_EPS = 1e-8
MASK_KINDS = ("binary", "ratio")


@dataclass
class SpectrogramMask:
    """Mask grid in [0, 1]; binary masks hold only 0 and 1"""
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"mask kind must be one of {MASK_KINDS}, got '{self.kind}'")
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("mask entries must lie in [0, 1]")
        if self.kind == "binary" and not np.all((self.values == 0) | (self.values == 1)):
            raise ValueError("binary mask entries must be 0 or 1")

    @property
    def shape(self):
        return self.values.shape


def fuse_features(visual: Tensor, audio: Tensor) -> Tensor:
    """[visual | audio] along the last axis"""
    if visual.ndim != audio.ndim or visual.shape[:-1] != audio.shape[:-1]:
        raise ShapeError(f"cannot fuse visual {visual.shape} with audio {audio.shape}")
    return T.concat([visual, audio], axis=-1)


class CoefficientGenerator:
    """linear -> batch norm -> ReLU -> linear(k)"""

    def __init__(self, params: LayerParams, in_dim: int, hidden: int, num_bases: int, prefix: str = "coef"):
        self.params = params
        self.prefix = prefix
        self.in_dim = in_dim
        self.num_bases = num_bases
        params.add_linear(f"{prefix}.hidden", hidden, in_dim)
        params.add_batchnorm(f"{prefix}.hidden.bn", hidden)
        params.add_linear(f"{prefix}.out", num_bases, hidden)

    def __call__(self, fused: Tensor, training: bool = False) -> Tensor:
        """fused: K×(C_v + C_b) -> M: K×k"""
        squeeze = fused.ndim == 1
        if squeeze:
            fused = T.reshape(fused, (1,) + fused.shape)
        if fused.shape[-1] != self.in_dim:
            raise ShapeError(f"coefficient generator expects {self.in_dim} features, got {fused.shape[-1]}")
        x = self.params.linear(f"{self.prefix}.hidden", fused)
        x = T.relu(self.params.batchnorm(f"{self.prefix}.hidden.bn", x, training))
        coefficients = self.params.linear(f"{self.prefix}.out", x)
        return T.reshape(coefficients, (self.num_bases,)) if squeeze else coefficients


def mask_logits(bases: Tensor, coefficients: Tensor, mixture_index: Sequence[int]) -> Tensor:
    """Σ_j P_j·M_j per object, reading the bases of that object's mixture -> K×F×N"""
    if bases.ndim != 4:
        raise ShapeError(f"bases must be B×k×F×N, got {bases.shape}")
    batch, k, n_bins, n_frames = bases.shape
    if coefficients.ndim != 2 or coefficients.shape[1] != k:
        raise ShapeError(f"coefficients {coefficients.shape} do not match {k} bases")
    if len(mixture_index) != coefficients.shape[0]:
        raise ShapeError(f"{len(mixture_index)} mixture indices for {coefficients.shape[0]} coefficient vectors")
    count = coefficients.shape[0]
    selected = T.reshape(T.take(bases, list(mixture_index)), (count, k, n_bins * n_frames))
    logits = T.matmul(T.reshape(coefficients, (count, 1, k)), selected)
    return T.reshape(logits, (count, n_bins, n_frames))


def compose_mask(bases: Tensor, coefficients: Tensor) -> Tensor:
    """σ(P Mᵀ) for one mixture: P k×F×N, M length k -> F×N in (0, 1)"""
    if coefficients.ndim != 1 or bases.ndim != 3 or coefficients.shape[0] != bases.shape[0]:
        raise ShapeError(f"need {bases.shape[0] if bases.ndim == 3 else '?'} coefficients for bases {bases.shape}, "
                         f"got {coefficients.shape}")
    logits = mask_logits(T.reshape(bases, (1,) + bases.shape),
                         T.reshape(coefficients, (1, coefficients.shape[0])), [0])
    return T.sigmoid(T.reshape(logits, bases.shape[1:]))


def _check_grids(target: np.ndarray, others: Sequence[np.ndarray]) -> None:
    for other in others:
        if np.shape(other) != np.shape(target):
            raise ShapeError(f"magnitude grids differ in shape: {np.shape(target)} vs {np.shape(other)}")
    if np.any(target < 0) or any(np.any(np.asarray(o) < 0) for o in others):
        raise ValueError("magnitudes must be nonnegative")


def gt_binary_mask(target_mag: np.ndarray, other_mags: Sequence[np.ndarray]) -> SpectrogramMask:
    """1 where the target is at least as loud as every other source (ties favour the target)"""
    target_mag = np.asarray(target_mag, dtype=np.float64)
    _check_grids(target_mag, other_mags)
    if not other_mags:
        return SpectrogramMask(np.ones_like(target_mag), "binary")
    loudest_other = np.max(np.stack([np.asarray(o, dtype=np.float64) for o in other_mags]), axis=0)
    return SpectrogramMask((target_mag >= loudest_other).astype(np.float64), "binary")


def gt_ratio_mask(target_mag: np.ndarray, all_mags: Sequence[np.ndarray]) -> SpectrogramMask:
    """target / (Σ sources + eps); all_mags includes the target"""
    target_mag = np.asarray(target_mag, dtype=np.float64)
    _check_grids(target_mag, all_mags)
    total = np.sum(np.stack([np.asarray(m, dtype=np.float64) for m in all_mags]), axis=0) if all_mags else target_mag
    return SpectrogramMask(np.clip(target_mag / (total + RATIO_EPS), 0.0, 1.0), "ratio")


def gt_mask(kind: str, target_index: int, mags: Sequence[np.ndarray]) -> SpectrogramMask:
    target = mags[target_index]
    if kind == "binary":
        return gt_binary_mask(target, [m for i, m in enumerate(mags) if i != target_index])
    if kind == "ratio":
        return gt_ratio_mask(target, mags)
    raise ValueError(f"unknown mask kind '{kind}'")


def separation_loss(logits: Tensor, gt: SpectrogramMask, kind: str) -> Tensor:
    """binary: mean BCE from logits; ratio: mean |σ(logits) - gt|"""
    if gt.kind != kind:
        raise ValueError(f"loss kind '{kind}' does not match ground-truth mask kind '{gt.kind}'")
    if logits.shape != gt.shape:
        raise ShapeError(f"predicted mask {logits.shape} does not match ground truth {gt.shape}")
    if kind == "binary":
        return T.tensor_mean(T.bce_with_logits(logits, gt.values))
    return T.tensor_mean(T.tensor_abs(T.sigmoid(logits) - gt.values))
