"""Alternating Deep/Wide training loop, SGD with momentum, step schedule, pretext mode."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import losses
from . import tensor as T
from .augment import MixupConfig, TransformSpec, mixup_batch
from .data import Batch, ImageDataset, batch_iterator
from .metrics import MetricsReport, evaluate_predictions
from .model import DeWiModel, classify, embed
from .tensor import Tensor

logger = logging.getLogger(__name__)

MODES = ("dewi", "deep_only", "wide_only", "mixup_all", "single_projector", "pretext")
CONTRASTIVE = ("triplet", "ntxent", "circle")


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 3e-3
    lr_decay: float = 0.9
    lr_step: int = 15
    min_lr: float = 3e-7
    momentum: float = 0.9
    weight_decay: float = 1e-4
    margin: float = 0.2
    beta1: float = 1.0
    beta2: float = 1.0
    mixup_alpha: float = 1.0
    seed: int = 0
    mode: str = "dewi"
    contrastive: str = "triplet"
    ntxent_temperature: float = 0.07
    ntxent_weight: float = 0.1
    circle_relaxation: float = 0.4
    circle_scale: float = 80.0
    circle_weight: float = 0.01
    pretext_epochs: int = 100
    pretext_lr: float = 3e-4
    probe_epochs: int = 50
    restore_best: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.contrastive not in CONTRASTIVE:
            raise ValueError(f"contrastive must be one of {CONTRASTIVE}, got {self.contrastive!r}")
        for name in ("lr", "lr_decay", "min_lr", "mixup_alpha", "pretext_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("momentum", "weight_decay", "margin", "beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.batch_size < 1 or self.lr_step < 1 or self.epochs < 0:
            raise ValueError("batch_size and lr_step must be >= 1 and epochs >= 0")


@dataclass
class EpochLog:
    epoch: int
    lr: float
    deep_loss: float
    wide_loss: float
    val_loss: float
    val_acc: float
    val_mf1: float
    val_gm: float
    stage: str = "main"

    HEADER = "epoch\tlr\tdeep_loss\twide_loss\tval_loss\tval_acc\tval_mf1\tval_gm"

    def to_tsv(self) -> str:
        return (f"{self.epoch}\t{self.lr:.6g}\t{self.deep_loss:.6f}\t{self.wide_loss:.6f}\t"
                f"{self.val_loss:.6f}\t{self.val_acc:.6f}\t{self.val_mf1:.6f}\t{self.val_gm:.6f}")


@dataclass
class TrainerState:
    epoch: int = 0
    iteration: int = 0
    deep_turn: bool = True
    global_step: int = 0
    momentum: dict = field(default_factory=dict)
    rng_dropout: np.random.Generator = None
    rng_mixup: np.random.Generator = None
    best_acc: float = -1.0
    best_state: Optional[dict] = None
    log: list = field(default_factory=list)
    deep_sum: float = 0.0
    deep_count: int = 0
    wide_sum: float = 0.0
    wide_count: int = 0
    stage: str = "main"
    step_tags: list = field(default_factory=list)
    last_loss: float = float("nan")

    @classmethod
    def fresh(cls, seed: int) -> "TrainerState":
        return cls(rng_dropout=np.random.default_rng([seed, 1]), rng_mixup=np.random.default_rng([seed, 2]))


def lr_at_epoch(config: TrainConfig, epoch: int, initial: Optional[float] = None) -> float:
    """Multi-step decay: initial × decay^⌊epoch / step⌋, floored at the minimum."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    base = config.lr if initial is None else initial
    return max(base * config.lr_decay ** (epoch // config.lr_step), config.min_lr)


def sgd_update(params, state: TrainerState, lr: float, momentum: float, weight_decay: float) -> None:
    """v ← momentum·v + (g + wd·p); p ← p − lr·v for every (name, tensor) with a gradient.

    All gradients are checked first; a non-finite one aborts the whole step.
    """
    params = [(n, p) for n, p in params if p.grad is not None]
    for name, p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {name}")
        if p.grad.shape != p.data.shape:
            raise T.ShapeError(f"{name}: gradient shape {p.grad.shape} != {p.data.shape}")
    for name, p in params:
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = state.momentum.get(name)
        if v is None:
            v = state.momentum[name] = np.zeros_like(p.data)
        v *= momentum
        v += g
        p.data -= lr * v


def _contrastive_term(z: Tensor, labels: np.ndarray, config: TrainConfig):
    if config.contrastive == "triplet":
        loss, mining = losses.triplet_margin_loss(z, labels, losses.TripletConfig(config.margin),
                                                  return_mining=True)
        return config.beta2 * loss, loss, mining.any_valid
    if config.contrastive == "ntxent":
        loss, n = losses.ntxent_loss(z, labels, config.ntxent_temperature, return_count=True)
        return config.ntxent_weight * loss, loss, n > 0
    loss, n = losses.circle_loss(z, labels, config.circle_relaxation, config.circle_scale, return_count=True)
    return config.circle_weight * loss, loss, n > 0


def is_deep_step(config: TrainConfig, state: TrainerState) -> bool:
    if config.mode == "deep_only":
        return True
    if config.mode in ("wide_only", "mixup_all"):
        return False
    return state.deep_turn


def train_iteration(model: DeWiModel, batch: Batch, state: TrainerState, config: TrainConfig,
                    lr: float) -> dict:
    """One Deep (β1·CE + β2·triplet on one-hot labels) or Wide (CE on a Mixup batch) update."""
    deep = is_deep_step(config, state)
    model.zero_grad()
    info = {"step": "D" if deep else "W"}
    if deep:
        z = embed(model, Tensor(batch.images), "train")
        probs = classify(model, z, "train", state.rng_dropout)
        ce = losses.cross_entropy(probs, batch.onehot)
        weighted, raw, valid = _contrastive_term(z, batch.labels, config)
        total = config.beta1 * ce + weighted
        info.update(ce=ce.item(), contrastive=raw.item(), contrastive_valid=valid)
        if not valid:
            logger.debug("deep step without a valid contrastive pair; contrastive term is 0")
    else:
        mixed_x, mixed_y, lam, _ = mixup_batch(batch.images, batch.onehot,
                                               MixupConfig(config.mixup_alpha), state.rng_mixup)
        z = embed(model, Tensor(mixed_x), "train")
        probs = classify(model, z, "train", state.rng_dropout)
        total = losses.cross_entropy(probs, mixed_y)
        info.update(ce=total.item(), lam=lam)
    value = total.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at epoch {state.epoch}, iteration {state.iteration}")
    T.backward(total)
    sgd_update(model.named_parameters(), state, lr, config.momentum, config.weight_decay)
    info["total"] = value
    state.step_tags.append(info["step"])
    if deep:
        state.deep_sum += value
        state.deep_count += 1
    else:
        state.wide_sum += value
        state.wide_count += 1
    state.deep_turn = not state.deep_turn
    state.global_step += 1
    state.last_loss = value
    return info


def evaluate(model: DeWiModel, dataset: ImageDataset, batch_size: int = 64,
             transforms: Optional[TransformSpec] = None) -> tuple:
    """Eval-mode metrics and mean cross-entropy over a dataset."""
    preds, truths, ce_sum = [], [], 0.0
    with T.no_grad():
        for batch in batch_iterator(dataset, batch_size, phase="eval", transforms=transforms):
            probs = classify(model, embed(model, Tensor(batch.images), "eval"), "eval")
            ce_sum += losses.cross_entropy(probs, batch.onehot).item() * len(batch)
            preds.append(probs.data.argmax(axis=1))
            truths.append(batch.labels)
    report = evaluate_predictions(np.concatenate(preds), np.concatenate(truths), dataset.num_classes)
    return report, ce_sum / len(dataset)


def _close_epoch(model, state, val, config, lr, transforms, stage) -> EpochLog:
    report, val_loss = evaluate(model, val, config.batch_size, transforms)
    entry = EpochLog(state.epoch, lr,
                     state.deep_sum / state.deep_count if state.deep_count else float("nan"),
                     state.wide_sum / state.wide_count if state.wide_count else float("nan"),
                     val_loss, report.acc, report.mf1, report.gm, stage)
    state.log.append(entry)
    if report.acc > state.best_acc:
        state.best_acc = report.acc
        state.best_state = model.copy_state()
    state.epoch += 1
    state.iteration = 0
    state.deep_sum = state.wide_sum = 0.0
    state.deep_count = state.wide_count = 0
    return entry


def fit(model: DeWiModel, train: ImageDataset, val: ImageDataset, config: TrainConfig,
        state: Optional[TrainerState] = None, transforms: Optional[TransformSpec] = None,
        on_epoch: Optional[Callable[[EpochLog], None]] = None,
        stop_after: Optional[int] = None):
    """Run the configured schedule from ``state`` (fresh if None).

    ``stop_after`` halts once ``state.global_step`` reaches it, leaving the
    state resumable mid-epoch. Returns ``(model, state)``; ``state.log`` holds
    one :class:`EpochLog` per finished epoch.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be nonempty")
    if config.mode == "pretext":
        return pretext_pretrain(model, train, val, config, state, transforms, on_epoch, stop_after)
    state = state or TrainerState.fresh(config.seed)
    while state.epoch < config.epochs:
        lr = lr_at_epoch(config, state.epoch)
        for batch in batch_iterator(train, config.batch_size, config.seed, state.epoch, "train",
                                    transforms, start=state.iteration):
            train_iteration(model, batch, state, config, lr)
            state.iteration += 1
            if stop_after is not None and state.global_step >= stop_after:
                return model, state
        entry = _close_epoch(model, state, val, config, lr, transforms, "main")
        if on_epoch:
            on_epoch(entry)
    if config.restore_best and state.best_state is not None:
        model.load_state(state.best_state)
    return model, state


def _pretext_step(model, batch, state, config, lr) -> float:
    model.zero_grad()
    z = embed(model, Tensor(batch.images), "train")
    loss = losses.triplet_margin_loss(z, batch.labels, losses.TripletConfig(config.margin))
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at pretext epoch {state.epoch}, iteration {state.iteration}")
    if loss.requires_grad:
        T.backward(loss)
    body = [(n, p) for n, p in model.named_parameters() if not n.startswith("classifier.")]
    sgd_update(body, state, lr, config.momentum, config.weight_decay)
    return value


def _probe_step(model, batch, state, config, lr) -> float:
    model.zero_grad()
    with T.no_grad():
        z = embed(model, Tensor(batch.images), "eval")
    probs = classify(model, z, "train", state.rng_dropout)
    loss = losses.cross_entropy(probs, batch.onehot)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at probe epoch {state.epoch}, iteration {state.iteration}")
    T.backward(loss)
    head = [(n, p) for n, p in model.named_parameters() if n.startswith("classifier.")]
    sgd_update(head, state, lr, config.momentum, config.weight_decay)
    return value


def pretext_pretrain(model: DeWiModel, train: ImageDataset, val: ImageDataset, config: TrainConfig,
                     state: Optional[TrainerState] = None, transforms: Optional[TransformSpec] = None,
                     on_epoch: Optional[Callable[[EpochLog], None]] = None,
                     stop_after: Optional[int] = None):
    """Two stages: triplet-only training of the feature extractor without the head,
    then a linear probe that updates only the classifier on frozen features."""
    state = state or TrainerState.fresh(config.seed)
    stages = (("pretext", config.pretext_epochs, config.pretext_lr, _pretext_step),
              ("probe", config.probe_epochs, config.lr, _probe_step))
    offset = 0
    for stage, epochs, base_lr, step in stages:
        end = offset + epochs
        while state.epoch < end:
            if state.stage != stage:
                state.stage = stage
                state.best_acc, state.best_state = -1.0, None
            lr = lr_at_epoch(config, state.epoch - offset, initial=base_lr)
            for batch in batch_iterator(train, config.batch_size, config.seed, state.epoch, "train",
                                        transforms, start=state.iteration):
                value = step(model, batch, state, config, lr)
                state.deep_sum += value
                state.deep_count += 1
                state.step_tags.append("P" if stage == "pretext" else "L")
                state.global_step += 1
                state.last_loss = value
                state.iteration += 1
                if stop_after is not None and state.global_step >= stop_after:
                    return model, state
            entry = _close_epoch(model, state, val, config, lr, transforms, stage)
            if on_epoch:
                on_epoch(entry)
        offset = end
    if config.restore_best and state.best_state is not None:
        model.load_state(state.best_state)
    return model, state


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def final_report(model: DeWiModel, dataset: ImageDataset, config: TrainConfig,
                 transforms: Optional[TransformSpec] = None) -> MetricsReport:
    return evaluate(model, dataset, config.batch_size, transforms)[0]
