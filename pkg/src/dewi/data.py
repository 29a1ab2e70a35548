"""Dataset manifests, stratified splits, batching and the synthetic desk dataset."""

from __future__ import annotations

import logging
import os
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
from PIL import Image

from .augment import TransformSpec, apply_transforms

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
MANIFEST_NAME = "manifest.tsv"


@dataclass
class Manifest:
    records: list  # (relative path, class index)
    class_names: list
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for path, k in self.records:
            if path in seen:
                raise ValueError(f"duplicate path in manifest: {path}")
            seen.add(path)
            if not 0 <= k < len(self.class_names):
                raise ValueError(f"class index {k} of {path} outside [0, {len(self.class_names)})")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([k for _, k in self.records], dtype=int)

    def subset(self, indices) -> "Manifest":
        return Manifest([self.records[i] for i in indices], list(self.class_names), self.root)


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def load_manifest(source: Union[str, os.PathLike], verify: bool = True) -> Manifest:
    """Read a class-folder tree or a ``path<TAB>class_index`` manifest file.

    Records come out in lexicographic order. Unreadable images are dropped
    with a warning naming the file.
    """
    source = Path(source)
    if not source.exists():
        raise FileNotFoundError(f"data source not found: {source}")
    if source.is_dir():
        return _load_tree(source, verify)
    return _load_file(source, verify)


def _load_tree(root: Path, verify: bool) -> Manifest:
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"no class folders under {root}")
    records, names = [], []
    for k, d in enumerate(class_dirs):
        names.append(d.name)
        files = sorted(f for f in d.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            logger.warning("class folder %s is empty", d)
        for f in files:
            if verify and not _readable(f):
                logger.warning("rejecting unreadable image %s", f)
                continue
            records.append((f.relative_to(root).as_posix(), k))
    return Manifest(records, names, root)


def _load_file(path: Path, verify: bool) -> Manifest:
    root = path.parent
    records, seen = [], set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'path<TAB>class_index', got {raw!r}")
        rel, k = parts[0], int(parts[1])
        if rel in seen:
            raise ValueError(f"{path}:{lineno}: duplicate path {rel}")
        seen.add(rel)
        if verify and not _readable(root / rel):
            logger.warning("rejecting unreadable image %s", root / rel)
            continue
        records.append((rel, k))
    records.sort()
    K = 1 + max((k for _, k in records), default=-1)
    present = {k for _, k in records}
    missing = sorted(set(range(K)) - present)
    if missing:
        raise ValueError(f"{path}: class indices are not dense, missing {missing}")
    return Manifest(records, [str(k) for k in range(K)], root)


def save_manifest(manifest: Manifest, path: Union[str, os.PathLike]) -> None:
    lines = ["# relative_path\tclass_index"]
    lines += [f"{p}\t{k}" for p, k in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = self.fractions
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")

    @property
    def fractions(self) -> tuple:
        return (self.train, self.val, self.test)


def largest_remainder(n: int, fractions) -> list:
    """Integer counts summing to ``n``; leftover units go to the largest
    fractional remainders, ties broken in part order.

    Quotas are exact rationals so 45 × 0.7 is 31.5, not 31.4999….
    """
    quotas = [n * Fraction(f).limit_denominator(10 ** 9) for f in fractions]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_indices(labels: np.ndarray, spec: SplitSpec) -> tuple:
    rng = np.random.default_rng(spec.seed)
    parts = ([], [], [])
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(idx.size)]
        if idx.size < len(parts):
            logger.warning("class %s has %d records; all assigned to train", k, idx.size)
            parts[0].extend(idx.tolist())
            continue
        counts = largest_remainder(idx.size, spec.fractions)
        bounds = np.cumsum(counts)[:-1]
        for part, chunk in zip(parts, np.split(idx, bounds)):
            part.extend(chunk.tolist())
    return tuple(np.array(sorted(p), dtype=int) for p in parts)


def split_dataset(data, spec: SplitSpec = None):
    """Stratified, seed-deterministic train/val/test partition of a manifest or dataset."""
    spec = spec or SplitSpec()
    return tuple(data.subset(ix) for ix in split_indices(data.labels(), spec))


# ---------------------------------------------------------------------------
# in-memory datasets


@dataclass
class ImageDataset:
    """Images as N×H×W×C uint8 with integer labels."""

    images: np.ndarray
    targets: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=int)
        if len(self.images) != len(self.targets):
            raise ValueError(f"{len(self.images)} images but {len(self.targets)} labels")
        if not self.class_names:
            self.class_names = [str(k) for k in range(int(self.targets.max(initial=-1)) + 1)]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.targets)

    def labels(self) -> np.ndarray:
        return self.targets

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices, dtype=int)
        return ImageDataset(self.images[indices], self.targets[indices], list(self.class_names))


def read_image(path: Union[str, os.PathLike], channels: int = 3) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im, dtype=np.uint8)
    return arr[..., None] if arr.ndim == 2 else arr


def load_images(manifest: Manifest, size: Optional[tuple] = None, channels: int = 3) -> ImageDataset:
    """Decode every record (optionally resizing to ``size``) into memory."""
    from .augment import resize_image

    imgs = []
    for rel, _ in manifest.records:
        img = read_image(manifest.root / rel, channels)
        imgs.append(resize_image(img, size) if size is not None else img)
    shapes = {im.shape for im in imgs}
    if len(shapes) > 1:
        raise ValueError(f"images have differing shapes {sorted(shapes)}; pass a common size")
    arr = np.stack(imgs) if imgs else np.zeros((0, 1, 1, channels), dtype=np.uint8)
    return ImageDataset(arr, manifest.labels(), list(manifest.class_names))


def _class_color(k: int, K: int) -> np.ndarray:
    hue = k / K
    return 0.5 + 0.5 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))


def synth_dataset(K: int, per_class: int, size: int = 32, noise: float = 0.1, seed: int = 0,
                  channels: int = 3) -> ImageDataset:
    """Class k: an oriented intensity ramp tinted by a class colour plus a blob
    whose vertical position is indexed by k, then Gaussian pixel noise.

    A horizontal flip mirrors the ramp but leaves the blob row and tint,
    which identify the class, untouched.
    """
    if K < 2:
        raise ValueError(f"need at least 2 classes, got {K}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    sigma = 0.25
    images, labels = [], []
    for k in range(K):
        theta = np.pi * k / K
        ramp = 0.5 + 0.25 * (xx * np.cos(theta) + yy * np.sin(theta))
        row = -0.75 + 1.5 * (k + 0.5) / K
        blob = np.exp(-((yy - row) ** 2 + xx ** 2) / (2 * sigma ** 2))
        color = _class_color(k, K)[:channels] if channels == 3 else np.array([0.3 + 0.4 * k / (K - 1)])
        base = 0.6 * ramp[..., None] * color + 0.4 * blob[..., None]
        for _ in range(per_class):
            img = base + noise * rng.standard_normal(base.shape) if noise > 0 else base
            images.append(np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8))
            labels.append(k)
    names = [f"class_{k:02d}" for k in range(K)]
    return ImageDataset(np.stack(images), np.array(labels), names)


def export_dataset(dataset: ImageDataset, root: Union[str, os.PathLike]) -> Manifest:
    """Write ``root/<class_name>/<index>.png`` files plus a manifest file."""
    root = Path(root)
    records = []
    counters = [0] * dataset.num_classes
    for img, k in zip(dataset.images, dataset.targets):
        name = dataset.class_names[k]
        (root / name).mkdir(parents=True, exist_ok=True)
        rel = f"{name}/{counters[k]:05d}.png"
        counters[k] += 1
        Image.fromarray(img.squeeze(-1) if img.shape[-1] == 1 else img).save(root / rel, format="PNG")
        records.append((rel, int(k)))
    manifest = Manifest(records, list(dataset.class_names), root)
    save_manifest(manifest, root / MANIFEST_NAME)
    return manifest


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: np.ndarray  # B×C×H×W float64
    labels: np.ndarray  # B ints
    num_classes: int
    indices: np.ndarray = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def onehot(self) -> np.ndarray:
        out = np.zeros((len(self.labels), self.num_classes))
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out


def epoch_order(n: int, seed: int, epoch: int, phase: str) -> np.ndarray:
    if phase == "train":
        return np.random.default_rng([seed, epoch]).permutation(n)
    return np.arange(n)


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def batch_iterator(dataset: ImageDataset, batch_size: int, seed: int = 0, epoch: int = 0,
                   phase: str = "train", transforms: Optional[TransformSpec] = None,
                   start: int = 0) -> Iterator[Batch]:
    """Yield batches covering every sample once; the final partial batch is kept.

    Train order is a permutation drawn from (seed, epoch). Augmentation draws
    come from a per-batch stream so iteration can resume at batch ``start``.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    if isinstance(dataset, Manifest):
        dataset = load_images(dataset)
    n = len(dataset)
    order = epoch_order(n, seed, epoch, phase)
    for b in range(start, num_batches(n, batch_size)):
        idx = order[b * batch_size:(b + 1) * batch_size]
        raw = dataset.images[idx]
        if transforms is None:
            imgs = raw.transpose(0, 3, 1, 2).astype(np.float64) / 255.0
        else:
            rng = np.random.default_rng([seed, epoch, b, 7])
            imgs = np.stack([apply_transforms(im, transforms, phase, rng) for im in raw])
        yield Batch(imgs, dataset.targets[idx], dataset.num_classes, idx)
