"""Line-based ``key = value`` configuration with ``[section]`` headers.

Every key has a default; unknown sections or keys are rejected with the line
number. ``--set section.key=value`` overrides go through the same coercion.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import get_type_hints

from .augment import build_pipelines, default_step, PipelineSet, COLOR, GRAY, BLUR, FLIP, ROTATION, CROP
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    train_path: str = "data/train.bin"
    test_path: str = "data/test.bin"
    image_size: int = 32


@dataclass(frozen=True)
class ModelSection:
    width: int = 32
    embed_dim: int = 32
    proj_dim: int = 64
    pred_hidden: int = 16
    residual: bool = False
    expansion: tuple = ("color",)


@dataclass(frozen=True)
class AugmentSection:
    mode: str = "hierarchical"
    arrangement: tuple = ("C", "G", "B", "F")
    rotation_from_stage: int = 0
    jitter_prob: float = 0.8
    gray_prob: float = 0.2
    blur_prob: float = 0.5
    flip_prob: float = 0.5
    rotation_prob: float = 0.5
    crop_min_scale: float = 0.2


@dataclass(frozen=True)
class TrainSection:
    objective: str = "simsiam"
    base_lr: float = 0.05
    batch_size: int = 256
    epochs: int = 30
    weight_decay: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    bt_lambda: float = 0.005
    stage_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    ckpt_every: int = 0
    max_images: int = 0
    out_dir: str = "runs/pretrain"


@dataclass(frozen=True)
class EvalSection:
    stage: int = 4
    probe_epochs: int = 30
    probe_lr: float = 0.1
    probe_batch: int = 256
    n_buckets: int = 10
    per_bucket: int = 200
    seeds: tuple = (0, 1, 2)
    invariance_samples: int = 256
    out_dir: str = "runs/eval"


SECTIONS = {"data": DataSection, "model": ModelSection, "augment": AugmentSection,
            "train": TrainSection, "eval": EvalSection}


@dataclass(frozen=True)
class Config:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "Config":
        t = self.train
        if t.batch_size < 2:
            raise ConfigError(f"train.batch_size must be >= 2, got {t.batch_size}")
        if t.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {t.epochs}")
        if t.objective not in ("simsiam", "barlow"):
            raise ConfigError(f"train.objective must be simsiam or barlow, got {t.objective!r}")
        if len(t.stage_weights) != 4:
            raise ConfigError(f"train.stage_weights needs 4 values, got {t.stage_weights}")
        if self.augment.rotation_from_stage not in (0, 1, 2, 3, 4):
            raise ConfigError(f"augment.rotation_from_stage must be 0..4, got {self.augment.rotation_from_stage}")
        self.pipelines()
        return self

    def pipelines(self) -> PipelineSet:
        a = self.augment
        overrides = {COLOR: {"probability": a.jitter_prob}, GRAY: {"probability": a.gray_prob},
                     BLUR: {"probability": a.blur_prob}, FLIP: {"probability": a.flip_prob},
                     ROTATION: {"probability": a.rotation_prob},
                     CROP: {"scale_range": (a.crop_min_scale, 1.0)}}
        try:
            return build_pipelines(a.arrangement, a.mode, a.rotation_from_stage or None, overrides)
        except ValueError as exc:
            raise ConfigError(f"[augment] {exc}") from exc

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(width=m.width, embed_dim=m.embed_dim, proj_dim=m.proj_dim, pred_hidden=m.pred_hidden,
                           residual=m.residual, expansion=tuple(m.expansion), image_size=self.data.image_size)

    def with_overrides(self, overrides: dict) -> "Config":
        """``{"section.key": "value"}`` -> new Config."""
        cfg = self
        for dotted, raw in overrides.items():
            section, _, key = dotted.partition(".")
            cfg = _set(cfg, section, key, raw, where=f"--set {dotted}")
        return cfg

    def to_text(self, sections=tuple(SECTIONS)) -> str:
        lines = []
        for name in sections:
            sec = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(sec):
                lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> bytes:
        """SHA-256 over the sections that fix the parameter inventory."""
        return hashlib.sha256(self.to_text(("data", "model", "augment")).encode()).digest()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value) if value else "none"
    return str(value)


def _coerce(kind, raw: str, item_type=str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        if raw.lower() in ("", "none"):
            return ()
        return tuple(item_type(p.strip()) for p in raw.strip("[]").split(",") if p.strip())
    return raw


_TUPLE_ITEMS = {("model", "expansion"): str, ("augment", "arrangement"): str,
                ("train", "stage_weights"): float, ("eval", "seeds"): int}


def _set(cfg: Config, section: str, key: str, raw: str, where: str) -> Config:
    if section not in SECTIONS:
        raise ConfigError(f"{where}: unknown section [{section}]")
    sec = getattr(cfg, section)
    hints = get_type_hints(type(sec))
    if key not in hints:
        raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
    kind = hints[key]
    kind = kind if isinstance(kind, type) else tuple
    try:
        value = _coerce(kind, raw, _TUPLE_ITEMS.get((section, key), str))
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from exc
    return replace(cfg, **{section: replace(sec, **{key: value})})


def parse_config(text: str, source: str = "<config>") -> Config:
    cfg = Config()
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}"
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {stripped!r}")
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if section is None:
            raise ConfigError(f"{where}: key {key!r} outside any section")
        cfg = _set(cfg, section, key, raw, where)
    return cfg


def load_config(path) -> Config:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))
