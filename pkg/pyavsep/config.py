"""
Presets and training configuration
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "MBS_SEED"
MASK_KINDS = ("binary", "ratio")
ACTIVATIONS = ("relu", "sigmoid")
GATE_SOURCES = ("decoder", "encoder")


@dataclass(frozen=True)
class Preset:
    """DSP and architecture constants that fix every tensor shape"""
    name: str
    sample_rate: int
    window_len: int
    hop: int
    frames: int
    warped_bins: int
    frame_size: int
    unet_depth: int
    num_bases: int
    unet_base_channels: int
    unet_max_channels: int
    encoder_channels: Tuple[int, ...]
    visual_channels: int
    coef_hidden: int

    @property
    def clip_len(self) -> int:
        """Samples giving exactly `frames` STFT frames"""
        return self.window_len + (self.frames - 1) * self.hop

    @property
    def linear_bins(self) -> int:
        return self.window_len // 2 + 1


PRESETS: Dict[str, Preset] = {
    "paper": Preset("paper", 11025, 1022, 256, 256, 256, 224, 7, 32, 32, 512, (32, 64, 128, 128), 64, 256),
    "desk": Preset("desk", 8000, 254, 64, 64, 64, 64, 4, 8, 16, 256, (16, 32, 64, 64), 64, 128),
    "tiny": Preset("tiny", 4000, 30, 8, 8, 8, 16, 2, 2, 2, 8, (2, 4, 4, 4), 4, 4),
}


def get_preset(name: str) -> Preset:
    if name not in PRESETS:
        raise ValueError(f"unknown preset '{name}' (choose from {', '.join(PRESETS)})")
    return PRESETS[name]


@dataclass
class TrainConfig:
    """Everything a training or evaluation run depends on"""
    preset: str = "desk"
    num_bases: Optional[int] = None
    unet_depth: Optional[int] = None
    num_classes: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    steps: int = 3000
    tau: float = 0.3
    mask_kind: str = "ratio"
    seed: int = 0
    lambda_cls: float = 0.5
    dropout: float = 0.5
    attention_activation: str = "relu"
    gate_source: str = "decoder"
    train_duet_fraction: float = 0.25
    eval_duet_fraction: float = 0.0
    eval_pairs: int = 100
    held_out_classes: Tuple[int, ...] = ()
    filter_len: int = 512
    log_every: int = 50
    precision: int = 32
    corpus_dir: str = "corpus"
    checkpoint: str = "model.ckpt"
    output_dir: str = "results"

    def __post_init__(self):
        spec = get_preset(self.preset)
        if self.num_bases is None:
            self.num_bases = spec.num_bases
        if self.unet_depth is None:
            self.unet_depth = spec.unet_depth
        self.held_out_classes = tuple(sorted({int(c) for c in self.held_out_classes}))

    @property
    def spec(self) -> Preset:
        return get_preset(self.preset)

    def validate(self) -> "TrainConfig":
        spec = self.spec
        positive = ["num_bases", "unet_depth", "num_classes", "learning_rate", "batch_size",
                    "steps", "eval_pairs", "filter_len", "log_every"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lambda_cls < 0 or self.weight_decay < 0:
            raise ValueError("lambda_cls and weight_decay must be nonnegative")
        for name in ("train_duet_fraction", "eval_duet_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.mask_kind not in MASK_KINDS:
            raise ValueError(f"mask_kind must be one of {MASK_KINDS}, got '{self.mask_kind}'")
        if self.attention_activation not in ACTIVATIONS:
            raise ValueError(f"attention_activation must be one of {ACTIVATIONS}, got '{self.attention_activation}'")
        if self.gate_source not in GATE_SOURCES:
            raise ValueError(f"gate_source must be one of {GATE_SOURCES}, got '{self.gate_source}'")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.num_classes < 2:
            raise ValueError("mix-and-separate needs at least 2 classes")
        outside = [c for c in self.held_out_classes if not 0 <= c < self.num_classes]
        if outside:
            raise ValueError(f"held_out_classes {outside} outside the {self.num_classes} classes")
        if self.num_classes - len(self.held_out_classes) < 2:
            raise ValueError("holding out these classes leaves fewer than 2 classes to train on")
        divisor = 2 ** self.unet_depth
        if spec.warped_bins % divisor or spec.frames % divisor:
            raise ValueError(f"preset '{spec.name}' grid {spec.warped_bins}x{spec.frames} "
                             f"is not divisible by 2^{self.unet_depth}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _check_keys(data: Dict[str, Any], source: str) -> None:
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"{source}: unknown config keys {unknown}")


def config_from_dict(data: Dict[str, Any], base: Optional[TrainConfig] = None, source: str = "config") -> TrainConfig:
    _check_keys(data, source)
    if base is None:
        return TrainConfig(**data)
    if "preset" in data and data["preset"] != base.preset:
        # preset-derived defaults must follow the new preset
        merged = {k: v for k, v in base.to_dict().items() if k not in ("num_bases", "unet_depth")}
        merged.update(data)
        return TrainConfig(**merged)
    return replace(base, **data)


def load_config_file(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    _check_keys(data, path)
    return data


def resolve_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                   environ: Optional[Dict[str, str]] = None) -> TrainConfig:
    """defaults < JSON file < MBS_SEED < explicit overrides"""
    environ = os.environ if environ is None else environ
    data: Dict[str, Any] = {}
    if config_path:
        data.update(load_config_file(config_path))
    if environ.get(SEED_ENV_VAR):
        try:
            data["seed"] = int(environ[SEED_ENV_VAR])
        except ValueError:
            raise ValueError(f"{SEED_ENV_VAR} must be an integer, got '{environ[SEED_ENV_VAR]}'")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    config = config_from_dict(data, source=config_path or "overrides")
    logger.debug("resolved config: %s", config)
    return config.validate()


def sidecar_path(checkpoint: str) -> str:
    return checkpoint + ".json"


def load_sidecar(checkpoint: str) -> TrainConfig:
    """Config stored next to a checkpoint"""
    path = sidecar_path(checkpoint)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no config sidecar {path} next to checkpoint {checkpoint}")
    return config_from_dict(load_config_file(path), source=path).validate()
