"""Mixup and the geometric image pipeline (resize, crop, flip, scale)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image


@dataclass
class MixupConfig:
    alpha: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"mixup alpha must be positive, got {self.alpha}")


def sample_lambda(config: MixupConfig, rng: np.random.Generator) -> float:
    """One Beta(α, α) draw."""
    return float(rng.beta(config.alpha, config.alpha))


def mixup_batch(images: np.ndarray, labels: np.ndarray, config: MixupConfig,
                rng: np.random.Generator, lam: Optional[float] = None):
    """Mix every sample with a partner chosen by a random permutation of the batch.

    One λ is shared by the whole batch. Returns ``(images, labels, lam, partner)``;
    batches of size 1 (or a disabled config) come back unchanged with ``lam=1``.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    B = images.shape[0]
    if labels.shape[0] != B:
        raise ValueError(f"{B} images but {labels.shape[0]} label rows")
    if B < 2 or not config.enabled:
        return images, labels, 1.0, np.arange(B)
    if lam is None:
        lam = sample_lambda(config, rng)
    partner = rng.permutation(B)
    mixed_x = lam * images + (1.0 - lam) * images[partner]
    mixed_y = lam * labels + (1.0 - lam) * labels[partner]
    return mixed_x, mixed_y, float(lam), partner


@dataclass
class TransformSpec:
    resize: Optional[tuple] = (400, 400)
    crop_size: Optional[tuple] = (384, 384)
    eval_crop: str = "center"  # center | none
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.resize is not None:
            self.resize = tuple(int(v) for v in self.resize)
        if self.crop_size is not None:
            self.crop_size = tuple(int(v) for v in self.crop_size)
        if self.eval_crop not in ("center", "none"):
            raise ValueError(f"eval_crop must be 'center' or 'none', got {self.eval_crop!r}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        if self.resize and self.crop_size and (self.crop_size[0] > self.resize[0]
                                               or self.crop_size[1] > self.resize[1]):
            raise ValueError(f"crop {self.crop_size} larger than resize target {self.resize}")

    def output_size(self, phase: str) -> tuple:
        if phase == "eval" and self.eval_crop == "none":
            return self.resize
        return self.crop_size or self.resize


def desk_transforms(size: int = 32, hflip_prob: float = 0.5) -> TransformSpec:
    return TransformSpec(resize=(size, size), crop_size=(size, size), hflip_prob=hflip_prob)


def resize_image(image: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear resize of an H×W×C uint8 image to ``size`` = (H, W)."""
    if image.shape[:2] == tuple(size):
        return image
    pil = Image.fromarray(image.squeeze(-1) if image.shape[-1] == 1 else image)
    out = np.asarray(pil.resize((size[1], size[0]), Image.BILINEAR))
    return out[..., None] if out.ndim == 2 else out


def center_offsets(extent: tuple, crop: tuple) -> tuple:
    return (extent[0] - crop[0]) // 2, (extent[1] - crop[1]) // 2


def apply_transforms(image: np.ndarray, spec: TransformSpec, phase: str,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """H×W×C uint8 image → C×H'×W' float64 array in [0, 1].

    train: resize → random crop → horizontal flip with ``hflip_prob``;
    eval: resize → center crop (or no crop when ``eval_crop == "none"``).
    """
    if phase not in ("train", "eval"):
        raise ValueError(f"phase must be 'train' or 'eval', got {phase!r}")
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 image, got {img.dtype}")
    if spec.resize is not None:
        img = resize_image(img, spec.resize)
    crop = spec.crop_size
    do_crop = crop is not None and not (phase == "eval" and spec.eval_crop == "none")
    if do_crop:
        H, W = img.shape[:2]
        if crop[0] > H or crop[1] > W:
            raise ValueError(f"image of {H}x{W} is smaller than crop {crop[0]}x{crop[1]}")
        if phase == "train":
            if rng is None:
                raise ValueError("train-phase transforms need an rng")
            top = int(rng.integers(0, H - crop[0] + 1))
            left = int(rng.integers(0, W - crop[1] + 1))
        else:
            top, left = center_offsets((H, W), crop)
        img = img[top:top + crop[0], left:left + crop[1]]
    if phase == "train" and spec.hflip_prob > 0:
        if rng is None:
            raise ValueError("train-phase transforms need an rng")
        if rng.random() < spec.hflip_prob:
            img = img[:, ::-1]
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float64) / 255.0
