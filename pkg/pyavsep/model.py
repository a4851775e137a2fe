"""
The assembled audio-visual separation network and its checkpoint I/O
"""

import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .config import TrainConfig, load_sidecar, sidecar_path
from .dsp import BinMap, ComplexSpectrogram, Waveform, log_compress, log_frequency_map, stft, warp_log_freq
from .fusion import CoefficientGenerator, fuse_features, mask_logits
from .tensor import LayerParams, Tensor
from .unet import AttentionUNet, UNetOutput
from .vision import FrameSegmenter, VisionOutput, pool_objects

logger = logging.getLogger(__name__)


@dataclass
class ObjectOutput:
    coefficients: Tensor   # K×k
    logits: Tensor         # K×F'×N pre-sigmoid masks


class AVSeparationModel:
    """Vision path, attention U-Net and coefficient generator over one parameter store"""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.spec = config.spec
        spec = self.spec
        self.params = LayerParams(np.random.default_rng([config.seed, 0]))
        self.vision = FrameSegmenter(self.params, config.num_classes, spec.frame_size, spec.encoder_channels,
                                     spec.visual_channels, config.attention_activation, config.dropout)
        self.unet = AttentionUNet(self.params, config.unet_depth, config.num_bases, spec.unet_base_channels,
                                  spec.unet_max_channels, config.gate_source)
        self.coefficients = CoefficientGenerator(self.params, spec.visual_channels + self.unet.bottleneck_channels,
                                                 spec.coef_hidden, config.num_bases)
        self.bin_map: BinMap = log_frequency_map(spec.linear_bins, spec.warped_bins)
        self.dropout_rng = np.random.default_rng([config.seed, 1])
        self.training = False
        self.basis_calls = 0

    def train(self) -> "AVSeparationModel":
        self.training = True
        return self

    def eval(self) -> "AVSeparationModel":
        self.training = False
        return self

    def audio_features(self, mixture: Waveform) -> Tuple[ComplexSpectrogram, np.ndarray]:
        """Mixture STFT and its warped log-magnitude (F'×N)"""
        if mixture.sample_rate != self.spec.sample_rate:
            raise ValueError(f"mixture is at {mixture.sample_rate} Hz, model expects {self.spec.sample_rate} Hz")
        if len(mixture) != self.spec.clip_len:
            raise ValueError(f"mixture has {len(mixture)} samples, preset '{self.spec.name}' clips have {self.spec.clip_len}")
        spectrogram = stft(mixture, self.spec.window_len, self.spec.hop)
        warped = warp_log_freq(spectrogram.magnitude(), self.spec.warped_bins, self.bin_map)
        return spectrogram, log_compress(warped.data)

    def warped_magnitude(self, wave: Waveform) -> np.ndarray:
        mag = stft(wave, self.spec.window_len, self.spec.hop).magnitude()
        return warp_log_freq(mag, self.spec.warped_bins, self.bin_map).data

    def vision_forward(self, frames: np.ndarray) -> VisionOutput:
        """frames: B×3×S×S in [0, 1]"""
        frames = np.asarray(frames)
        if not np.all((frames >= 0.0) & (frames <= 1.0)):
            raise ValueError("frame values must lie in [0, 1]; convert uint8 frames with frame_to_chw")
        return self.vision.forward(Tensor(frames), self.training, self.dropout_rng)

    def audio_forward(self, log_specs: np.ndarray) -> UNetOutput:
        """log_specs: B×F'×N; bases are computed once per call for every mixture in it"""
        log_specs = np.asarray(log_specs)
        self.basis_calls += 1
        return self.unet.forward(Tensor(log_specs[:, None, :, :]), self.training)

    def object_logits(self, vision_out: VisionOutput, unet_out: UNetOutput,
                      objects: Sequence[Tuple[int, int, int]]) -> ObjectOutput:
        """objects: (frame index, class id, mixture index) per separated object"""
        if not objects:
            raise ValueError("no objects to separate")
        visual = pool_objects(vision_out.features, vision_out.combined, [(f, c) for f, c, _ in objects])
        mixtures = [m for _, _, m in objects]
        audio = T.take(unet_out.bottleneck, mixtures)
        coefficients = self.coefficients(fuse_features(visual, audio), self.training)
        return ObjectOutput(coefficients, mask_logits(unet_out.bases, coefficients, mixtures))

    def state(self):
        return self.params.state()

    def load_state(self, state) -> None:
        self.params.load_state(state)


def save_model(model: AVSeparationModel, path: str) -> None:
    """Checkpoint plus <path>.json config sidecar"""
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"checkpoint directory {parent} does not exist")
    T.save_checkpoint(model.state(), path)
    model.config.save(sidecar_path(path))
    logger.info("saved %d tensors to %s", len(model.state()), path)


def load_model(path: str, config: Optional[TrainConfig] = None) -> AVSeparationModel:
    """Rebuild the architecture (from the sidecar unless given) and load weights"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path} not found")
    if config is None:
        config = load_sidecar(path)
    model = AVSeparationModel(config)
    model.load_state(T.load_checkpoint(path))
    return model.eval()


