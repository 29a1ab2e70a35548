"""Flat ``key = value`` run configuration.

One namespace covers the model, optimization, transform and split settings.
Lines are ``key = value``; ``#`` starts a comment. Tuples are written
``32x32`` (or ``32,32``), booleans ``true``/``false``, an absent size ``none``.
Unknown keys are rejected with the key named.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

from .augment import TransformSpec, desk_transforms
from .data import SplitSpec
from .model import ModelConfig, desk_model_config, paper_model_config
from .trainer import TrainConfig

PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    """Invalid key or value in a run configuration."""


KEY_DOCS = {
    # model
    "input_channels": "image channels",
    "input_size": "network input HxW; must equal the transform output size",
    "base_width": "width of the first core block; later blocks double it",
    "blocks_per_stage": "residual blocks per core block",
    "projector_dim": "output width of each projector (z has twice this width)",
    "num_classes": "number of classes; must match the data",
    "dropout_rate": "dropout before the classifier",
    "single_projector": "one projector on the last block only, emitting the full z width",
    "block": "residual block type: basic | bottleneck",
    "stem_kernel": "stem convolution kernel size",
    "stem_stride": "stem convolution stride",
    "low_tap_kernel": "kernel of the convolution on the third block's output",
    "low_pool": "adaptive pooling grid before the low projector",
    "bn_momentum": "batch-norm running-statistics momentum",
    "bn_eps": "batch-norm epsilon",
    # optimization
    "epochs": "training epochs",
    "batch_size": "mini-batch size",
    "lr": "initial learning rate",
    "lr_decay": "multiplicative decay applied every lr_step epochs",
    "lr_step": "epochs between learning-rate decays",
    "min_lr": "learning-rate floor",
    "momentum": "SGD momentum",
    "weight_decay": "L2 weight decay on all parameters",
    "margin": "triplet margin",
    "beta1": "weight of cross-entropy in the Deep step",
    "beta2": "weight of the metric loss in the Deep step",
    "mixup_alpha": "Beta(alpha, alpha) parameter of Mixup",
    "seed": "training seed (data order, augmentation, dropout, Mixup, init)",
    "mode": "dewi | deep_only | wide_only | mixup_all | single_projector | pretext",
    "contrastive": "metric loss of the Deep step: triplet | ntxent | circle",
    "ntxent_temperature": "NTXent temperature",
    "ntxent_weight": "NTXent weight (replaces beta2)",
    "circle_relaxation": "Circle loss relaxation m",
    "circle_scale": "Circle loss scale gamma",
    "circle_weight": "Circle loss weight (replaces beta2)",
    "pretext_epochs": "triplet-only pretraining epochs (pretext mode)",
    "pretext_lr": "pretraining learning rate (pretext mode)",
    "probe_epochs": "classifier-only epochs after pretraining (pretext mode)",
    "restore_best": "restore the best-validation-accuracy weights after training",
    # transforms
    "resize": "resize target HxW before cropping (none keeps the stored size)",
    "crop_size": "random crop (train) and center crop (eval) HxW",
    "eval_crop": "center | none",
    "hflip_prob": "horizontal flip probability during training",
    # split
    "split_train": "train fraction of each class",
    "split_val": "validation fraction of each class",
    "split_test": "test fraction of each class",
    "split_seed": "seed of the stratified split",
}

_SPLIT_KEYS = {"split_train": "train", "split_val": "val", "split_test": "test", "split_seed": "seed"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=desk_model_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    transforms: TransformSpec = field(default_factory=desk_transforms)
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        out = self.transforms.output_size("train")
        if out is not None and tuple(out) != tuple(self.model.input_size):
            raise ConfigError(f"transform output size {tuple(out)} does not match "
                              f"input_size {tuple(self.model.input_size)}")

    def as_flat(self) -> dict:
        flat = {}
        for section in (self.model, self.train, self.transforms):
            flat.update(dataclasses.asdict(section))
        for key, attr in _SPLIT_KEYS.items():
            flat[key] = getattr(self.split, attr)
        return flat


def preset(name: str = "desk") -> RunConfig:
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return RunConfig(model=paper_model_config(), transforms=TransformSpec())
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


def _section_keys(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


_MODEL_KEYS = _section_keys(ModelConfig)
_TRAIN_KEYS = _section_keys(TrainConfig)
_TRANSFORM_KEYS = _section_keys(TransformSpec)
ALL_KEYS = _MODEL_KEYS | _TRAIN_KEYS | _TRANSFORM_KEYS | set(_SPLIT_KEYS)


def parse_value(key: str, text: str, current):
    """Parse ``text`` into the type of the key's current value."""
    text = text.strip()
    low = text.lower()
    try:
        if isinstance(current, bool):
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple) or (current is None and key in ("resize", "crop_size")):
            if low == "none":
                return None
            parts = text.replace("x", ",").replace("X", ",").split(",")
            if len(parts) == 1:
                parts = parts * 2
            return tuple(int(p) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def apply_overrides(run: RunConfig, values: Mapping[str, Union[str, object]]) -> RunConfig:
    """Return a new config with ``values`` (strings are parsed) applied."""
    flat = run.as_flat()
    for key, value in values.items():
        if key not in ALL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        flat[key] = parse_value(key, value, flat[key]) if isinstance(value, str) else value
    try:
        return RunConfig(
            model=ModelConfig(**{k: flat[k] for k in _MODEL_KEYS}),
            train=TrainConfig(**{k: flat[k] for k in _TRAIN_KEYS}),
            transforms=TransformSpec(**{k: flat[k] for k in _TRANSFORM_KEYS}),
            split=SplitSpec(**{attr: flat[key] for key, attr in _SPLIT_KEYS.items()}))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        values[key] = value
    return values


def load_config(path: Optional[Union[str, os.PathLike]] = None, preset_name: str = "desk",
                overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    """Preset, then the file at ``path``, then ``overrides`` (later wins)."""
    run = preset(preset_name)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        run = apply_overrides(run, parse_config_text(path.read_text(), str(path)))
    if overrides:
        run = apply_overrides(run, overrides)
    return run


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return "x".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(run: RunConfig) -> str:
    """Every key with its value and a one-line description; parses back to ``run``."""
    lines = []
    for key, value in run.as_flat().items():
        lines.append(f"# {KEY_DOCS[key]}")
        lines.append(f"{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"
