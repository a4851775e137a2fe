"""
Finite-difference gradient checks of every differentiable piece, in 64-bit
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .core import forward_losses, make_mixed_item, prepare_batch
from .corpus import CorpusConfig, make_sample
from .model import AVSeparationModel
from .tensor import LayerParams, Tensor
from .unet import AttentionGate, AttentionUNet
from .vision import FrameSegmenter, c_loss

logger = logging.getLogger(__name__)

TOLERANCE = 1e-5
STEP = 1e-6
COORDS = 5


@dataclass
class GradCheckResult:
    name: str
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)


def _leaf(rng: np.random.Generator, *shape: int, away_from_zero: float = 0.0) -> Tensor:
    values = rng.standard_normal(shape)
    if away_from_zero:
        values = np.sign(values) * (np.abs(values) + away_from_zero)
    return Tensor(values, requires_grad=True)


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Projection onto a fixed random direction so every output entry matters"""
    direction = rng.standard_normal(out.shape)
    return lambda y: T.tensor_sum(y * direction)


def _check(name: str, build: Callable[[], Tensor], leaves: Dict[str, Tensor],
           rng: np.random.Generator) -> List[GradCheckResult]:
    project = _weighted(build(), rng)
    objective = lambda: project(build())  # noqa: E731
    return [GradCheckResult(f"{name}[{leaf}]", T.grad_check(objective, theta, STEP, COORDS, rng))
            for leaf, theta in leaves.items()]


def check_ops(rng: np.random.Generator) -> List[GradCheckResult]:
    results: List[GradCheckResult] = []
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    results += _check("add", lambda: a + b, {"a": a, "b": b}, rng)
    results += _check("mul", lambda: a * b, {"a": a, "b": b}, rng)
    d = _leaf(rng, 4, away_from_zero=0.5)
    results += _check("div", lambda: a / d, {"a": a, "b": d}, rng)
    p = _leaf(rng, 3, 4, away_from_zero=0.1)
    results += _check("abs", lambda: T.tensor_abs(p), {"x": p}, rng)
    results += _check("relu", lambda: T.relu(p), {"x": p}, rng)
    results += _check("sigmoid", lambda: T.sigmoid(a), {"x": a}, rng)
    m1, m2 = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    results += _check("matmul", lambda: T.matmul(m1, m2), {"a": m1, "b": m2}, rng)
    results += _check("take", lambda: T.take(m1, [1, 0, 1]), {"x": m1}, rng)
    results += _check("concat", lambda: T.concat([a, p], axis=1), {"a": a, "b": p}, rng)
    results += _check("mean", lambda: T.tensor_mean(m1, axis=(1, 2), keepdims=True), {"x": m1}, rng)
    targets = (rng.random((3, 4)) > 0.5).astype(np.float64)
    results += _check("bce_with_logits", lambda: T.bce_with_logits(a, targets), {"logits": a}, rng)

    x = _leaf(rng, 2, 3, 6, 6)
    kernel, bias = _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    results += _check("conv2d", lambda: T.conv2d(x, kernel, bias, stride=2, padding=1),
                      {"x": x, "kernel": kernel, "bias": bias}, rng)
    tkernel, tbias = _leaf(rng, 3, 2, 2, 2), _leaf(rng, 2)
    results += _check("conv_transpose2d", lambda: T.conv_transpose2d(x, tkernel, tbias, stride=2),
                      {"x": x, "kernel": tkernel, "bias": tbias}, rng)
    scale, shift = _leaf(rng, 3), _leaf(rng, 3)
    running = (np.zeros(3), np.ones(3))
    results += _check("batchnorm2d", lambda: T.batchnorm2d(x, scale, shift, *running, training=True),
                      {"x": x, "scale": scale, "shift": shift}, rng)
    flat = _leaf(rng, 5, 3)
    results += _check("batchnorm1d", lambda: T.batchnorm2d(flat, scale, shift, *running, training=True),
                      {"x": flat}, rng)
    results += _check("dropout", lambda: T.dropout(x, 0.5, True, np.random.default_rng(7)), {"x": x}, rng)
    results += _check("spatial_average_pool", lambda: T.spatial_average_pool(x), {"x": x}, rng)
    distinct = Tensor(rng.permutation(2 * 3 * 36).reshape(2, 3, 6, 6) / 10.0, requires_grad=True)
    results += _check("max_pool2x2", lambda: T.max_pool2x2(distinct), {"x": distinct}, rng)
    weight = Tensor(rng.random((2, 6, 6)) + 0.1, requires_grad=True)
    results += _check("weighted_pool", lambda: T.weighted_pool(x, weight), {"x": x, "weight": weight}, rng)
    results += _check("upsample_nearest", lambda: T.upsample_nearest(x, 2), {"x": x}, rng)
    return results


def check_attention_gate(rng: np.random.Generator) -> List[GradCheckResult]:
    params = LayerParams(np.random.default_rng(1))
    gate_module = AttentionGate(params, "gate", skip_channels=4, gate_channels=6)
    skip, gate = _leaf(rng, 2, 4, 8, 8), _leaf(rng, 2, 6, 4, 4)
    leaves = {"skip": skip, "gate": gate}
    leaves.update(params.items())
    return _check("attention_gate", lambda: gate_module(skip, gate)[0], leaves, rng)


def check_unet(rng: np.random.Generator) -> List[GradCheckResult]:
    """Full forward/backward of a depth-2 U-Net on an 8×8 grid"""
    spec = TrainConfig(preset="tiny").spec
    params = LayerParams(np.random.default_rng(2))
    unet = AttentionUNet(params, spec.unet_depth, spec.num_bases, spec.unet_base_channels, spec.unet_max_channels)
    log_spec = Tensor(rng.random((2, 1, spec.warped_bins, spec.frames)))
    directions = rng.standard_normal((2, spec.num_bases, spec.warped_bins, spec.frames))

    def objective() -> Tensor:
        out = unet.forward(log_spec, training=True)
        return T.tensor_sum(out.bases * directions) + T.tensor_sum(out.bottleneck)

    errors = T.grad_check_params(objective, params, STEP, 3, rng)
    return [GradCheckResult(f"unet[{name}]", err) for name, err in errors.items()]


def check_vision(rng: np.random.Generator) -> List[GradCheckResult]:
    """c-loss through both attention branches w.r.t. every vision parameter"""
    spec = TrainConfig(preset="tiny").spec
    params = LayerParams(np.random.default_rng(3))
    vision = FrameSegmenter(params, 3, spec.frame_size, spec.encoder_channels, spec.visual_channels,
                            "relu", dropout=0.5)
    frames = Tensor(rng.random((2, 3, spec.frame_size, spec.frame_size)))
    labels = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])

    def objective() -> Tensor:
        out = vision.forward(frames, training=True, rng=np.random.default_rng(11))
        return c_loss(out.scores, labels)

    errors = T.grad_check_params(objective, params, STEP, 3, rng)
    return [GradCheckResult(f"vision[{name}]", err) for name, err in errors.items()]


def check_end_to_end(rng: np.random.Generator, mask_kind: str) -> List[GradCheckResult]:
    """Total training loss of the assembled tiny model w.r.t. every parameter"""
    config = TrainConfig(preset="tiny", num_classes=2, mask_kind=mask_kind, precision=64).validate()
    corpus = CorpusConfig(preset="tiny", num_classes=2)
    model = AVSeparationModel(config).train()
    item = make_mixed_item(make_sample(0, "train", 0, corpus), make_sample(1, "train", 1, corpus))
    batch = prepare_batch(model, [item], mask_kind)

    def objective() -> Tensor:
        model.dropout_rng = np.random.default_rng(13)
        return forward_losses(model, batch, config)["total"]

    errors = T.grad_check_params(objective, model.params, STEP, 2, rng)
    return [GradCheckResult(f"end_to_end_{mask_kind}[{name}]", err) for name, err in errors.items()]


def run_gradcheck_suite(seed: int = 0) -> List[GradCheckResult]:
    """Every check, each with its own generator so results do not depend on order"""
    results: List[GradCheckResult] = []
    with T.precision(64):
        suites = [check_ops, check_attention_gate, check_unet, check_vision,
                  lambda r: check_end_to_end(r, "binary"), lambda r: check_end_to_end(r, "ratio")]
        for index, suite in enumerate(suites):
            results += suite(np.random.default_rng([seed, index]))
    failed = [r for r in results if not r.passed]
    logger.info("gradcheck: %d checks, %d failed, worst %.3g", len(results), len(failed),
                max(r.error for r in results))
    return results
