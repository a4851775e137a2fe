"""
Weakly-supervised sounding-object segmentation from a single frame.

A strided conv encoder produces spatial features V_f. Two attention branches
read them: the expansive branch (dropout, 1x1 conv, dropout, activation, then
per-channel spatial normalization) and the discriminative branch (a single
1x1 conv). Their product X_m is the soft segmentation and its spatial mean
the class score S, trained with a multi-label BCE on clip-level labels.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from . import tensor as T
from .tensor import LayerParams, ShapeError, Tensor

logger = logging.getLogger(__name__)

NORMALIZE_EPS = 1e-8
ENCODER_STRIDES = (2, 2, 2, 1)


@dataclass
class VisionOutput:
    """All intermediates of one forward pass (batch-first)"""
    features: Tensor        # V_f: B×C_v×H×W
    expansive: Tensor       # A_E: B×|C|×H×W, each channel sums to 1
    discriminative: Tensor  # A_D: B×|C|×H×W
    combined: Tensor        # X_m = A_E ⊙ A_D
    scores: Tensor          # S: B×|C|


def spatial_normalize(alpha: Tensor, eps: float = NORMALIZE_EPS) -> Tensor:
    """(alpha + eps/HW) / (Σ_HW alpha + eps); channels sum to exactly 1, zero channels become uniform"""
    h, w = alpha.shape[-2:]
    total = T.tensor_sum(alpha, axis=(-2, -1), keepdims=True)
    return (alpha + eps / (h * w)) / (total + eps)


def combine_and_score(expansive: Tensor, discriminative: Tensor) -> Tuple[Tensor, Tensor]:
    """X_m = A_E ⊙ A_D and S_c = spatial mean of X_m channel c"""
    if expansive.shape != discriminative.shape:
        raise ShapeError(f"attention maps differ in shape: {expansive.shape} vs {discriminative.shape}")
    combined = expansive * discriminative
    return combined, T.tensor_mean(combined, axis=(-2, -1))


def c_loss(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Multi-label BCE on class scores: sum over classes, mean over the batch"""
    labels = np.asarray(labels)
    if labels.shape != scores.shape:
        raise ShapeError(f"labels {labels.shape} do not match scores {scores.shape}")
    per_class = T.bce_with_logits(scores, labels)
    if scores.ndim == 1:
        return T.tensor_sum(per_class)
    return T.tensor_mean(T.tensor_sum(per_class, axis=-1))


def class_probabilities(scores) -> np.ndarray:
    values = scores.values if isinstance(scores, Tensor) else np.asarray(scores)
    return expit(values)


def detect_objects(scores, tau: float) -> List[int]:
    """Class ids c with sigmoid(S_c) >= tau, ascending"""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    probs = class_probabilities(scores)
    if probs.ndim != 1:
        raise ShapeError(f"detect_objects takes one score vector, got shape {probs.shape}")
    return [int(c) for c in np.flatnonzero(probs >= tau)]


def pool_objects(features: Tensor, combined: Tensor, items: Sequence[Tuple[int, int]]) -> Tensor:
    """Attention-pooled visual vectors for (frame index, class id) pairs -> K×C_v"""
    if features.ndim != 4 or combined.ndim != 4 or features.shape[0] != combined.shape[0] \
            or features.shape[2:] != combined.shape[2:]:
        raise ShapeError(f"features {features.shape} and attention {combined.shape} do not align")
    batch, num_classes, h, w = combined.shape
    frames = [int(f) for f, _ in items]
    flat = []
    for frame, cls in items:
        if not 0 <= cls < num_classes or not 0 <= frame < batch:
            raise ValueError(f"object ({frame}, {cls}) outside batch {batch} x {num_classes} classes")
        flat.append(frame * num_classes + cls)
    weights = T.take(T.reshape(T.relu(combined), (batch * num_classes, h, w)), flat)
    return T.weighted_pool(T.take(features, frames), weights)


def pooled_visual_feature(features: Tensor, combined: Tensor, class_id: int) -> Tensor:
    """Single-frame form: V_f (C_v×H×W), X_m (|C|×H×W) -> length-C_v vector"""
    pooled = pool_objects(T.reshape(features, (1,) + features.shape),
                          T.reshape(combined, (1,) + combined.shape), [(0, class_id)])
    return T.reshape(pooled, (features.shape[0],))


class FrameSegmenter:
    """Encoder plus the two attention branches"""

    def __init__(self, params: LayerParams, num_classes: int, frame_size: int,
                 encoder_channels: Sequence[int], visual_channels: int,
                 activation: str = "relu", dropout: float = 0.5, prefix: str = "vision"):
        if len(encoder_channels) != len(ENCODER_STRIDES):
            raise ValueError(f"encoder needs {len(ENCODER_STRIDES)} channel counts, got {len(encoder_channels)}")
        if frame_size % 8:
            raise ValueError(f"frame size must be a multiple of 8, got {frame_size}")
        self.params = params
        self.num_classes = num_classes
        self.frame_size = frame_size
        self.activation = activation
        self.dropout = dropout
        self.prefix = prefix

        c_in = 3
        for i, c_out in enumerate(encoder_channels):
            params.add_conv(f"{prefix}.encoder.{i}", c_out, c_in, 3)
            c_in = c_out
        params.add_conv(f"{prefix}.features", visual_channels, c_in, 3)
        params.add_conv(f"{prefix}.expansive", num_classes, visual_channels, 1)
        params.add_conv(f"{prefix}.discriminative", num_classes, visual_channels, 1)

    @property
    def feature_size(self) -> int:
        return self.frame_size // 8

    def encode_frame(self, frames: Tensor) -> Tensor:
        """B×3×S×S in [0, 1] -> V_f (B×C_v×S/8×S/8)"""
        frames = T.as_tensor(frames)
        if frames.ndim == 3:
            frames = T.reshape(frames, (1,) + frames.shape)
        if frames.shape[1:] != (3, self.frame_size, self.frame_size):
            raise ShapeError(f"frames must be 3×{self.frame_size}×{self.frame_size}, got {frames.shape[1:]}")
        x = frames
        for i, stride in enumerate(ENCODER_STRIDES):
            x = T.relu(self.params.conv(f"{self.prefix}.encoder.{i}", x, stride=stride, padding=1))
        return self.params.conv(f"{self.prefix}.features", x, padding=1)

    def expansive_attention(self, features: Tensor, training: bool = False,
                            rng: Optional[np.random.Generator] = None) -> Tensor:
        x = T.dropout(features, self.dropout, training, rng)
        x = self.params.conv(f"{self.prefix}.expansive", x)
        x = T.dropout(x, self.dropout, training, rng)
        return spatial_normalize(T.activation(x, self.activation))

    def discriminative_attention(self, features: Tensor) -> Tensor:
        return self.params.conv(f"{self.prefix}.discriminative", features)

    def forward(self, frames: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> VisionOutput:
        features = self.encode_frame(frames)
        expansive = self.expansive_attention(features, training, rng)
        discriminative = self.discriminative_attention(features)
        combined, scores = combine_and_score(expansive, discriminative)
        return VisionOutput(features, expansive, discriminative, combined, scores)
