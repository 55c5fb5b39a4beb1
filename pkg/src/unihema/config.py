"""Resolved training/architecture configuration.

A config JSON file may set any subset of the fields below; the rest keep
their desk-scale defaults. The digest of the fully resolved config is
printed by every CLI run and stored in checkpoints, which refuse to load
into a differently-configured model.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .errors import ConfigurationError


@dataclass
class TrainConfig:
    # architecture dims
    M: int = 64                      # image token width
    N: int = 64                      # text token width
    heads: int = 4
    encoder_layers: int = 2          # 6 in the paper-faithful setting
    decoder_layers: int = 2
    text_encoder_layers: int = 2
    text_decoder_layers: int = 2
    K: int = 20                      # top-K queries; equals D_t
    L_f: int = 16                    # fusion query count
    mlp_ratio: int = 2
    backbone_channels: tuple = (32, 64, 128)
    stem_stride: int = 4
    mask_channels: int = 64
    upsampler_channels: int = 8
    num_classes: int = 4
    num_morph: int = 6
    vocab_size: int = 0              # resolved from the dataset vocabulary
    upsample_mode: str = "learnable"
    classify_integrate: bool = True
    # optimization
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    warmup_steps: int = 0
    epochs_per_stage: tuple = (3, 3, 4, 4, 4, 3)
    steps_per_stage: Optional[tuple] = None   # per-stage step caps overriding epochs
    batch_per_task: int = 2
    seed: int = 0
    # loss weights
    w_class: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_morph: float = 1.0

    def __post_init__(self):
        if self.M % self.heads != 0:
            raise ConfigurationError(f"M={self.M} must be divisible by heads={self.heads}")
        if self.N % self.heads != 0:
            raise ConfigurationError(f"N={self.N} must be divisible by heads={self.heads}")
        for name in ("M", "N", "heads", "encoder_layers", "decoder_layers",
                     "text_encoder_layers", "text_decoder_layers", "K", "L_f",
                     "num_classes", "num_morph", "batch_per_task"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.upsample_mode not in ("bilinear", "learnable"):
            raise ConfigurationError(f"unknown upsample_mode: {self.upsample_mode}")
        if len(self.epochs_per_stage) != 6:
            raise ConfigurationError("epochs_per_stage must list all six stages")
        self.backbone_channels = tuple(self.backbone_channels)
        self.epochs_per_stage = tuple(self.epochs_per_stage)
        if self.steps_per_stage is not None:
            self.steps_per_stage = tuple(self.steps_per_stage)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["epochs_per_stage"] = list(self.epochs_per_stage)
        if self.steps_per_stage is not None:
            d["steps_per_stage"] = list(self.steps_per_stage)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid config JSON ({exc})") from None
        return cls.from_dict(data)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def diff(self, other: "TrainConfig") -> list[str]:
        """Names of fields whose values differ."""
        a, b = self.to_dict(), other.to_dict()
        return sorted(k for k in a if a[k] != b[k])
