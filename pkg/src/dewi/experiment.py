"""End-to-end helpers shared by the command line and the experiment scripts."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .config import RunConfig
from .data import ImageDataset, load_images, load_manifest, split_dataset, synth_dataset
from .metrics import MetricsReport
from .model import DeWiModel, build_model
from .trainer import EpochLog, TrainerState, evaluate, fit

DESK_PER_CLASS = 71  # 4 classes × 71 → a 200 / 28 / 56 stratified split


@dataclass
class Splits:
    train: ImageDataset
    val: ImageDataset
    test: ImageDataset

    @property
    def class_names(self) -> list:
        return self.train.class_names


@dataclass
class RunResult:
    model: DeWiModel
    state: TrainerState
    train: MetricsReport
    test: MetricsReport


def model_config_for(run: RunConfig):
    """The run's model config; mode single_projector switches the projector layout on."""
    if run.train.mode == "single_projector" and not run.model.single_projector:
        return dataclasses.replace(run.model, single_projector=True)
    return run.model


def init_model(run: RunConfig, seed: Optional[int] = None) -> DeWiModel:
    seed = run.train.seed if seed is None else seed
    return build_model(model_config_for(run), np.random.default_rng([seed, 0]))


def load_dataset(source: Union[str, os.PathLike], run: RunConfig) -> ImageDataset:
    """Decode a class-folder tree or manifest file, resized to the transform's resize size."""
    manifest = load_manifest(source)
    if len(manifest) == 0:
        raise ValueError(f"no readable images under {source}")
    return load_images(manifest, run.transforms.resize, run.model.input_channels)


def split(dataset: ImageDataset, run: RunConfig) -> Splits:
    return Splits(*split_dataset(dataset, run.split))


def synthetic_splits(run: RunConfig, per_class: int = DESK_PER_CLASS, noise: float = 0.1,
                     data_seed: int = 0) -> Splits:
    size = run.model.input_size[0]
    ds = synth_dataset(run.model.num_classes, per_class, size, noise, data_seed, run.model.input_channels)
    return split(ds, run)


def check_classes(run: RunConfig, dataset: ImageDataset) -> None:
    if dataset.num_classes != run.model.num_classes:
        raise ValueError(f"data has {dataset.num_classes} classes but the model expects "
                         f"{run.model.num_classes} (set num_classes)")


def train_run(run: RunConfig, splits: Splits, on_epoch: Optional[Callable[[EpochLog], None]] = None,
              model: Optional[DeWiModel] = None) -> RunResult:
    """Train with the run's settings, then report on the train and test splits."""
    check_classes(run, splits.train)
    model = model or init_model(run)
    model, state = fit(model, splits.train, splits.val, run.train, transforms=run.transforms,
                       on_epoch=on_epoch)
    bs = run.train.batch_size
    train_report = evaluate(model, splits.train, bs, run.transforms)[0]
    test_report = evaluate(model, splits.test, bs, run.transforms)[0]
    return RunResult(model, state, train_report, test_report)


def ensure_dir(path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
