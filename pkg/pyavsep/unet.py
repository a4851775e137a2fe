"""
Attention U-Net over the warped log-magnitude spectrogram
"""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from . import tensor as T
from .tensor import LayerParams, ShapeError, Tensor

logger = logging.getLogger(__name__)


@dataclass
class UNetOutput:
    bases: Tensor             # P: B×k×F'×N, pre-sigmoid
    bottleneck: Tensor        # A_f: B×C_b
    gate_maps: List[np.ndarray]  # per skip level, B×1×H×W in (0, 1), coarsest first


class AttentionGate:
    """Additive attention on a skip connection: skip ⊙ σ(ψ(relu(W_s·skip + W_g·up(gate) + b)))"""

    def __init__(self, params: LayerParams, name: str, skip_channels: int, gate_channels: int):
        self.params = params
        self.name = name
        self.skip_channels = skip_channels
        self.gate_channels = gate_channels
        inter = max(1, skip_channels // 2)
        params.add_conv(f"{name}.skip", inter, skip_channels, 1, bias=False)
        params.add_conv(f"{name}.gate", inter, gate_channels, 1)
        params.add_conv(f"{name}.psi", 1, inter, 1)

    def coefficients(self, skip: Tensor, gate: Tensor) -> Tensor:
        if skip.shape[1] != self.skip_channels or gate.shape[1] != self.gate_channels:
            raise ShapeError(f"{self.name}: expected skip/gate channels {self.skip_channels}/{self.gate_channels}, "
                             f"got {skip.shape[1]}/{gate.shape[1]}")
        factor = skip.shape[-1] // gate.shape[-1]
        if factor < 1 or gate.shape[-2] * factor != skip.shape[-2] or gate.shape[-1] * factor != skip.shape[-1]:
            raise ShapeError(f"{self.name}: gate {gate.shape[-2:]} is not an integer downscale of skip {skip.shape[-2:]}")
        gated = T.upsample_nearest(self.params.conv(f"{self.name}.gate", gate), factor)
        hidden = T.relu(self.params.conv(f"{self.name}.skip", skip) + gated)
        return T.sigmoid(self.params.conv(f"{self.name}.psi", hidden))

    def __call__(self, skip: Tensor, gate: Tensor):
        alpha = self.coefficients(skip, gate)
        return skip * alpha, alpha


def attention_gate(skip: Tensor, gate: Tensor, gate_module: AttentionGate) -> Tensor:
    output, _ = gate_module(skip, gate)
    return output


class AttentionUNet:
    """depth stride-2 conv blocks down, depth transposed-conv blocks up, gated skips, 1x1 head to k bases"""

    def __init__(self, params: LayerParams, depth: int, num_bases: int, base_channels: int,
                 max_channels: int, gate_source: str = "decoder", prefix: str = "unet"):
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        if gate_source not in ("decoder", "encoder"):
            raise ValueError(f"gate_source must be 'decoder' or 'encoder', got '{gate_source}'")
        self.params = params
        self.depth = depth
        self.num_bases = num_bases
        self.gate_source = gate_source
        self.prefix = prefix
        self.channels = [min(base_channels * 2 ** level, max_channels) for level in range(depth)]

        c_in = 1
        for level, c_out in enumerate(self.channels):
            params.add_conv(f"{prefix}.down.{level}", c_out, c_in, 3)
            params.add_batchnorm(f"{prefix}.down.{level}.bn", c_out)
            c_in = c_out

        self.gates = {}
        for j in range(depth - 1, 0, -1):
            c_skip = self.channels[j - 1]
            params.add_conv_transpose(f"{prefix}.up.{j}", self.channels[j], c_skip, 2, 2)
            params.add_batchnorm(f"{prefix}.up.{j}.bn", c_skip)
            self.gates[j] = AttentionGate(params, f"{prefix}.gate.{j}", c_skip, self.channels[j])
            params.add_conv(f"{prefix}.merge.{j}", c_skip, 2 * c_skip, 3)
            params.add_batchnorm(f"{prefix}.merge.{j}.bn", c_skip)
        params.add_conv_transpose(f"{prefix}.up.0", self.channels[0], self.channels[0], 2, 2)
        params.add_batchnorm(f"{prefix}.up.0.bn", self.channels[0])
        params.add_conv(f"{prefix}.head", num_bases, self.channels[0], 1)

    @property
    def bottleneck_channels(self) -> int:
        return self.channels[-1]

    def _block(self, name: str, x: Tensor, training: bool) -> Tensor:
        return T.relu(self.params.batchnorm(f"{name}.bn", x, training))

    def forward(self, spec: Tensor, training: bool = False) -> UNetOutput:
        """spec: B×1×F'×N (or F'×N) log-magnitude; F', N divisible by 2^depth"""
        spec = T.as_tensor(spec)
        if spec.ndim == 2:
            spec = T.reshape(spec, (1, 1) + spec.shape)
        if spec.ndim != 4 or spec.shape[1] != 1:
            raise ShapeError(f"U-Net input must be B×1×F×N, got {spec.shape}")
        divisor = 2 ** self.depth
        if spec.shape[2] % divisor or spec.shape[3] % divisor:
            raise ShapeError(f"U-Net input {spec.shape[2]}×{spec.shape[3]} must be divisible by 2^{self.depth} = {divisor}")

        p = self.prefix
        encoded = []
        x = spec
        for level in range(self.depth):
            x = self.params.conv(f"{p}.down.{level}", x, stride=2, padding=1)
            x = self._block(f"{p}.down.{level}", x, training)
            encoded.append(x)

        gate_maps = []
        d = encoded[-1]
        for j in range(self.depth - 1, 0, -1):
            up = self._block(f"{p}.up.{j}", self.params.conv_transpose(f"{p}.up.{j}", d, stride=2), training)
            gate_signal = d if self.gate_source == "decoder" else encoded[j]
            gated, alpha = self.gates[j](encoded[j - 1], gate_signal)
            gate_maps.append(alpha.values)
            merged = self.params.conv(f"{p}.merge.{j}", T.concat([up, gated], axis=1), padding=1)
            d = self._block(f"{p}.merge.{j}", merged, training)
        d = self._block(f"{p}.up.0", self.params.conv_transpose(f"{p}.up.0", d, stride=2), training)
        bases = self.params.conv(f"{p}.head", d)
        bottleneck = T.spatial_average_pool(encoded[-1])
        return UNetOutput(bases, bottleneck, gate_maps)
