"""Run configuration and its ``key = value`` text form."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .distill import DistillConfig, ModelConfig
from .errors import ParameterError, ParseError
from .fip import FIPConfig
from .pipeline import AugConfig
from .vit import ViTConfig


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run depends on.

    Schedule spans: learning-rate warmup covers ``warmup_epochs``; the weight
    decay and teacher momentum cosines run over the whole run, warmup
    included. ``max_steps`` > 0 overrides ``total_epochs``.
    """

    # model
    image_size: int = 64
    patch_size: int = 8
    dim: int = 96
    depth: int = 4
    heads: int = 4
    layerscale_init: float = 1e-5
    out_dim: int = 1024
    head_hidden: int = 256
    bottleneck: int = 64
    # optimisation
    base_lr: float = 1e-4
    min_lr: float = 0.0
    warmup_epochs: float = 10.0
    total_epochs: float = 100.0
    max_steps: int = 0
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    clip_grad: float = 0.0               # per-tensor gradient norm cap; 0 disables
    wd_start: float = 0.04
    wd_end: float = 0.4
    momentum_start: float = 0.994
    momentum_end: float = 1.0
    teacher_momentum: str = "cosine"     # "cosine" or "const:<lambda>"
    mask_ratio_min: float = 0.1
    mask_ratio_max: float = 0.5
    seed: int = 0
    # distillation
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    mim_normalize: bool = True
    teacher_sees_masked: bool = False
    aggregate: str = "mean"
    # ablations
    head: str = "fip"
    gpc: bool = True
    neighborhood: int = 3
    top_k: int = 3
    # augmentation
    crop_min: float = 0.4
    flip_prob: float = 0.5
    jitter: bool = True
    blur: bool = True

    def __post_init__(self):
        if self.warmup_epochs > self.total_epochs and not self.max_steps:
            raise ParameterError("warmup_epochs exceeds total_epochs")
        if self.clip_grad < 0:
            raise ParameterError("clip_grad must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be positive")
        if self.head not in ("fip", "avg"):
            raise ParameterError(f"head must be 'fip' or 'avg', got {self.head!r}")
        self.constant_momentum()
        # validates the nested configs early
        self.model_config()
        self.distill_config()
        self.aug_config()

    def constant_momentum(self) -> float | None:
        mode = self.teacher_momentum
        if mode == "cosine":
            return None
        if mode.startswith("const:"):
            try:
                value = float(mode[6:])
            except ValueError:
                pass
            else:
                if 0.0 <= value <= 1.0:
                    return value
        raise ParameterError(f"teacher_momentum must be 'cosine' or 'const:<0..1>', got {mode!r}")

    def model_config(self) -> ModelConfig:
        v = ViTConfig(image_size=self.image_size, patch_size=self.patch_size, dim=self.dim,
                      depth=self.depth, heads=self.heads, layerscale_init=self.layerscale_init)
        f = FIPConfig(dim=self.dim, heads=self.heads, out_dim=self.out_dim,
                      head_hidden=self.head_hidden, bottleneck=self.bottleneck, mode=self.head)
        return ModelConfig(v, f)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            neighborhood=self.neighborhood, top_k=self.top_k, use_gpc=self.gpc,
            aggregate=self.aggregate, student_temp=self.student_temp,
            teacher_temp=self.teacher_temp, center_momentum=self.center_momentum,
            mim_normalize=self.mim_normalize, teacher_sees_masked=self.teacher_sees_masked,
            mask_ratio_range=(self.mask_ratio_min, self.mask_ratio_max))

    def aug_config(self) -> AugConfig:
        return AugConfig(output_size=self.image_size, crop_scale=(self.crop_min, 1.0),
                         flip_prob=self.flip_prob, enable_jitter=self.jitter,
                         enable_blur=self.blur)

    def steps_per_epoch(self, corpus_size: int) -> int:
        return max(1, corpus_size // self.batch_size)

    def total_steps(self, corpus_size: int) -> int:
        if self.max_steps > 0:
            return self.max_steps
        return int(round(self.total_epochs * self.steps_per_epoch(corpus_size)))

    def warmup_steps(self, corpus_size: int) -> int:
        w = int(round(self.warmup_epochs * self.steps_per_epoch(corpus_size)))
        return min(w, self.total_steps(corpus_size))

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str, base: TrainConfig | None = None) -> TrainConfig:
        return (base or cls()).replace(**parse_overrides(text))

    @classmethod
    def desk(cls) -> TrainConfig:
        """Desk-scale preset used by the smoke run (200 steps, batch 16)."""
        return cls(max_steps=200, warmup_epochs=1.0, total_epochs=13.0, base_lr=5e-4,
                   min_lr=1e-5, teacher_momentum="cosine", momentum_start=0.95)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ParseError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ParseError(f"bad value {raw!r} for {key} ({kind})") from exc
    return raw


def parse_overrides(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return TrainConfig.from_text(Path(path).read_text(), base)
