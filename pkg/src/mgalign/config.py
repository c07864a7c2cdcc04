"""Configuration records and their (de)serialisation.

Config files are YAML (JSON is accepted too, being a YAML subset). Every key
has a default, so an empty file is a valid config.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

FUSION_MODES = ("gated", "average", "conv1x1", "none")
LEVEL_STRIDES = {3: 8, 4: 16, 5: 32, 6: 64, 7: 128}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 3
    levels: tuple[int, ...] = (3, 4, 5)
    channels: int = 64
    backbone_norm: bool = False
    # max-LTRB range (lo, hi] handled by each level; None means +inf
    level_ranges: tuple[tuple[float, float | None], ...] = ((-1.0, 16.0), (16.0, 32.0), (32.0, None))
    fusion_mode: str = "gated"
    tau: float = 10.0
    head_convs: int = 2
    disc_channels: int = 64
    gn_groups: int = 16

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(LEVEL_STRIDES[k] for k in self.levels)

    def validate(self) -> None:
        if not self.levels or any(k not in LEVEL_STRIDES for k in self.levels):
            raise ConfigError(f"levels must be a non-empty subset of {sorted(LEVEL_STRIDES)}")
        if list(self.levels) != sorted(set(self.levels)):
            raise ConfigError("levels must be strictly increasing")
        if len(self.level_ranges) != len(self.levels):
            raise ConfigError("level_ranges needs one (lo, hi) pair per level")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")


@dataclass
class TrainConfig:
    alpha: float = 0.1
    lambda_dis: float = 1.0
    lambda_sim: float = 0.1
    theta_cat: float = 0.5
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0001
    stage1_iters: int = 300
    stage2_iters: int = 300
    multiscale_sides: tuple[int, ...] = (96, 128, 160)
    use_category_discriminator: bool = True
    # "predicted" (detector argmax) or "gt" for source-image pseudo labels
    source_pseudo_labels: str = "predicted"
    grad_clip: float | None = 10.0
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive; momentum and weight_decay non-negative")
        if self.alpha < 0 or self.lambda_dis < 0 or self.lambda_sim < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0 < self.theta_cat <= 1:
            raise ConfigError("theta_cat must lie in (0, 1]")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("stage lengths must be >= 0")
        if self.source_pseudo_labels not in ("predicted", "gt"):
            raise ConfigError("source_pseudo_labels must be 'predicted' or 'gt'")


@dataclass
class SynthConfig:
    num_classes: int = 3
    image_size: int = 128
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (12.0, 112.0)
    blur_sigma: float = 2.0
    brightness_shift: float = 0.4
    noise_amplitude: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.size_range
        if not 0 < lo <= hi <= self.image_size:
            raise ConfigError(f"size_range {self.size_range} must satisfy 0 < lo <= hi <= image_size")
        if self.objects_per_image[0] < 0 or self.objects_per_image[0] > self.objects_per_image[1]:
            raise ConfigError("objects_per_image must be an ordered non-negative pair")


@dataclass
class DataSplits:
    source_train: int = 200
    target_train: int = 200
    target_eval: int = 100
    source_eval: int = 50


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    splits: DataSplits = field(default_factory=DataSplits)
    data_root: str | None = None
    output_dir: str = "runs/default"
    score_threshold: float = 0.01
    nms_iou: float = 0.5

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        if self.synth.num_classes != self.model.num_classes:
            raise ConfigError("synth.num_classes and model.num_classes disagree")


def to_dict(cfg: Any) -> dict:
    return _plain(dataclasses.asdict(cfg))


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tupleize(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    return value


def from_dict(cls: type, data: dict | None) -> Any:
    """Build dataclass ``cls`` from a (possibly partial) nested dict; unknown keys are errors."""
    data = dict(data or {})
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = from_dict(type(default), value)
        else:
            kwargs[key] = _coerce(f"{cls.__name__}.{key}", default, _tupleize(value))
    return cls(**kwargs)


def _coerce(name: str, default: Any, value: Any) -> Any:
    """Match scalar ``value`` to the type of ``default`` (YAML reads ``1e-3`` as a string)."""
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, float) and not isinstance(value, bool):
            return float(value)
        if isinstance(default, int) and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}") from None
    return value


def apply_override(data: dict, dotted: str, value: Any) -> None:
    """Set ``a.b.c=value`` inside a nested dict."""
    *parents, leaf = dotted.split(".")
    node = data
    for part in parents:
        node = node.setdefault(part, {})
    node[leaf] = value


def load_run_config(
    path: str | Path | None, overrides: dict[str, Any] | None = None, base: dict[str, Any] | None = None
) -> RunConfig:
    """Layer ``base`` (a partial config mapping), the YAML file and dotted overrides, in that order."""
    data: dict = copy.deepcopy(base) if base else {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for key, value in loaded.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key].update(value)
            else:
                data[key] = value
    for key, value in (overrides or {}).items():
        apply_override(data, key, value)
    cfg = from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def dump_run_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=True), encoding="utf-8")
