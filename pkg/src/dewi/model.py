"""The DeWi network: residual backbone, two-level projector feature extractor, classifier head."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

NUM_STAGES = 4


@dataclass
class ModelConfig:
    input_channels: int = 3
    input_size: tuple = (32, 32)
    base_width: int = 8
    blocks_per_stage: int = 1
    projector_dim: int = 64
    num_classes: int = 4
    dropout_rate: float = 0.5
    single_projector: bool = False
    block: str = "basic"  # basic | bottleneck
    stem_kernel: int = 3
    stem_stride: int = 1
    low_tap_kernel: int = 1
    low_pool: tuple = (1, 1)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.low_pool = tuple(int(v) for v in self.low_pool)
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.projector_dim < 1:
            raise ValueError(f"projector_dim must be >= 1, got {self.projector_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.block not in ("basic", "bottleneck"):
            raise ValueError(f"block must be 'basic' or 'bottleneck', got {self.block!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def stage_widths(self) -> list:
        w = self.base_width
        return [w, 2 * w, 4 * w, 8 * w]

    @property
    def stem_width(self) -> int:
        return self.base_width if self.block == "basic" else max(1, self.base_width // 4)

    @property
    def low_feature_dim(self) -> int:
        """Width of the flattened low-level vector fed to the low projector."""
        return 8 * self.base_width * self.low_pool[0] * self.low_pool[1]

    @property
    def embedding_dim(self) -> int:
        return 2 * self.projector_dim


def desk_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def paper_model_config(**overrides) -> ModelConfig:
    cfg = dict(input_channels=3, input_size=(384, 384), base_width=256, projector_dim=4096,
               num_classes=102, block="bottleneck", stem_kernel=7, stem_stride=4)
    cfg.update(overrides)
    return ModelConfig(**cfg)


@dataclass(eq=False)
class DeWiModel:
    """Parameters in declaration order plus batch-norm running statistics."""

    config: ModelConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    bn_updates: int = 0

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict:
        """Every array that defines the model, parameters first, then running stats."""
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def copy_state(self) -> dict:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def load_state(self, arrays: dict) -> None:
        for name, p in self.params.items():
            src = arrays[name]
            if src.shape != p.data.shape:
                raise ShapeError(f"{name}: stored shape {src.shape} != model shape {p.data.shape}")
            p.data[...] = src
        for name, buf in self.buffers.items():
            buf[...] = arrays[name]

    def group(self, prefix: str) -> list:
        return [p for n, p in self.params.items() if n.startswith(prefix)]


# ---------------------------------------------------------------------------
# construction


def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class _Builder:
    def __init__(self, model: DeWiModel, rng: np.random.Generator):
        self.m = model
        self.rng = rng

    def param(self, name: str, data: np.ndarray) -> None:
        self.m.params[name] = Tensor(data, requires_grad=True, name=name)

    def conv(self, name: str, cin: int, cout: int, k: int, bias: bool = False) -> None:
        self.param(f"{name}.weight", _he(self.rng, (cout, cin, k, k), cin * k * k))
        if bias:
            self.param(f"{name}.bias", np.zeros(cout))

    def linear(self, name: str, din: int, dout: int, bias: bool = True) -> None:
        self.param(f"{name}.weight", _he(self.rng, (dout, din), din))
        if bias:
            self.param(f"{name}.bias", np.zeros(dout))

    def bn(self, name: str, c: int) -> None:
        self.param(f"{name}.scale", np.ones(c))
        self.param(f"{name}.shift", np.zeros(c))
        self.m.buffers[f"{name}.running_mean"] = np.zeros(c)
        self.m.buffers[f"{name}.running_var"] = np.ones(c)

    def block(self, name: str, cin: int, cout: int, stride: int, kind: str) -> None:
        if kind == "basic":
            self.conv(f"{name}.conv1", cin, cout, 3)
            self.bn(f"{name}.bn1", cout)
            self.conv(f"{name}.conv2", cout, cout, 3)
            self.bn(f"{name}.bn2", cout)
        else:
            mid = max(1, cout // 4)
            self.conv(f"{name}.conv1", cin, mid, 1)
            self.bn(f"{name}.bn1", mid)
            self.conv(f"{name}.conv2", mid, mid, 3)
            self.bn(f"{name}.bn2", mid)
            self.conv(f"{name}.conv3", mid, cout, 1)
            self.bn(f"{name}.bn3", cout)
        if stride != 1 or cin != cout:
            self.conv(f"{name}.short", cin, cout, 1)
            self.bn(f"{name}.short_bn", cout)

    def projector(self, name: str, din: int, dim: int, out_dim: int) -> None:
        # the first two affine layers feed batch-norm, which cancels any bias
        self.linear(f"{name}.fc1", din, dim, bias=False)
        self.bn(f"{name}.bn1", dim)
        self.linear(f"{name}.fc2", dim, dim, bias=False)
        self.bn(f"{name}.bn2", dim)
        self.linear(f"{name}.fc3", dim, out_dim)


def stage_extents(config: ModelConfig) -> list:
    """Spatial extent entering the stem and each stage, and leaving the last one."""
    h, w = config.input_size
    k, s = config.stem_kernel, config.stem_stride
    h, w = T.conv_output_size(h, k, s, k // 2), T.conv_output_size(w, k, s, k // 2)
    sizes = [(h, w)]
    for _ in range(NUM_STAGES):
        h, w = T.conv_output_size(h, 3, 2, 1), T.conv_output_size(w, 3, 2, 1)
        sizes.append((h, w))
    return sizes


def validate_geometry(config: ModelConfig) -> None:
    h, w = config.input_size
    if min(h, w) < config.stem_kernel // 2 + 1:
        raise ValueError(f"input_size {config.input_size} is too small for the stem")
    sizes = stage_extents(config)
    for stage in range(NUM_STAGES):
        hin, win = sizes[stage]
        if hin < 2 or win < 2:
            raise ValueError(
                f"input_size {config.input_size} does not survive stride-2 stage {stage + 1}: "
                f"its input would be {hin}x{win}")
    h3, w3 = sizes[3]
    if config.low_pool[0] > h3 or config.low_pool[1] > w3:
        raise ValueError(f"low_pool {config.low_pool} exceeds stage-3 output {h3}x{w3}")


def build_model(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> DeWiModel:
    """Allocate and initialize every parameter (He-normal weights, unit/zero batch-norm)."""
    validate_geometry(config)
    rng = rng if rng is not None else np.random.default_rng(0)
    model = DeWiModel(config)
    b = _Builder(model, rng)
    b.conv("stem.conv", config.input_channels, config.stem_width, config.stem_kernel)
    b.bn("stem.bn", config.stem_width)
    cin = config.stem_width
    for s, cout in enumerate(config.stage_widths, start=1):
        for i in range(config.blocks_per_stage):
            b.block(f"stage{s}.block{i}", cin, cout, 2 if i == 0 else 1, config.block)
            cin = cout
    w3, w4 = config.stage_widths[2], config.stage_widths[3]
    P = config.projector_dim
    if not config.single_projector:
        # no bias: the projector's first batch-norm cancels any per-channel offset
        b.conv("low_tap", w3, w4, config.low_tap_kernel)
        b.projector("low_proj", config.low_feature_dim, P, P)
        b.projector("high_proj", w4, P, P)
    else:
        b.projector("high_proj", w4, P, 2 * P)
    b.linear("classifier", config.embedding_dim, config.num_classes)
    return model


# ---------------------------------------------------------------------------
# forward


def _training(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def _bn(model: DeWiModel, name: str, x: Tensor, training: bool) -> Tensor:
    p, buf, cfg = model.params, model.buffers, model.config
    return T.batch_norm(x, p[f"{name}.scale"], p[f"{name}.shift"],
                        buf[f"{name}.running_mean"], buf[f"{name}.running_var"],
                        training, cfg.bn_momentum, cfg.bn_eps)


def _conv(model: DeWiModel, name: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    p = model.params
    return T.conv2d(x, p[f"{name}.weight"], p.get(f"{name}.bias"), stride, padding)


def _block(model: DeWiModel, name: str, x: Tensor, stride: int, training: bool) -> Tensor:
    if model.config.block == "basic":
        h = T.relu(_bn(model, f"{name}.bn1", _conv(model, f"{name}.conv1", x, stride, 1), training))
        h = _bn(model, f"{name}.bn2", _conv(model, f"{name}.conv2", h, 1, 1), training)
    else:
        h = T.relu(_bn(model, f"{name}.bn1", _conv(model, f"{name}.conv1", x), training))
        h = T.relu(_bn(model, f"{name}.bn2", _conv(model, f"{name}.conv2", h, stride, 1), training))
        h = _bn(model, f"{name}.bn3", _conv(model, f"{name}.conv3", h), training)
    if f"{name}.short.weight" in model.params:
        x = _bn(model, f"{name}.short_bn", _conv(model, f"{name}.short", x, stride), training)
    return T.relu(h + x)


def _projector(model: DeWiModel, name: str, x: Tensor, training: bool) -> Tensor:
    p = model.params
    h = T.relu(_bn(model, f"{name}.bn1", T.affine(x, p[f"{name}.fc1.weight"]), training))
    h = T.relu(_bn(model, f"{name}.bn2", T.affine(h, p[f"{name}.fc2.weight"]), training))
    return T.affine(h, p[f"{name}.fc3.weight"], p[f"{name}.fc3.bias"])


def backbone(model: DeWiModel, images: Tensor, mode: str) -> list:
    """Outputs of the four core blocks."""
    training = _training(mode)
    cfg = model.config
    expected = (cfg.input_channels, *cfg.input_size)
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise ShapeError(f"images of shape {images.shape} do not match B×{expected}")
    if not training and model.bn_updates == 0:
        logger.warning("eval-mode forward with never-updated running statistics; "
                       "using initialization values")
    k = cfg.stem_kernel
    h = T.relu(_bn(model, "stem.bn", _conv(model, "stem.conv", images, cfg.stem_stride, k // 2), training))
    outs = []
    for s in range(1, NUM_STAGES + 1):
        for i in range(cfg.blocks_per_stage):
            h = _block(model, f"stage{s}.block{i}", h, 2 if i == 0 else 1, training)
        outs.append(h)
    return outs


def embed(model: DeWiModel, images: Tensor, mode: str, return_parts: bool = False):
    """Multi-level representation z = concat(low projection, high projection).

    With ``return_parts`` a dict of intermediate tensors is returned alongside z.
    """
    training = _training(mode)
    feats = backbone(model, images, mode)
    high_in = T.pool_avg(feats[3], "global")
    high = _projector(model, "high_proj", high_in, training)
    parts = {"blocks": feats, "high_in": high_in, "high": high}
    if model.config.single_projector:
        z = high
    else:
        tap = _conv(model, "low_tap", feats[2])
        low_in = T.flatten(T.pool_avg(tap, model.config.low_pool))
        low = _projector(model, "low_proj", low_in, training)
        parts.update(low_in=low_in, low=low)
        z = T.concat([low, high], axis=1)
    if training:
        model.bn_updates += 1
    return (z, parts) if return_parts else z


def logits(model: DeWiModel, z: Tensor, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    training = _training(mode)
    w = model.params["classifier.weight"]
    if z.ndim != 2 or z.shape[1] != w.shape[1]:
        raise ShapeError(f"embedding width {z.shape[-1]} does not match classifier input {w.shape[1]}")
    h = T.dropout(z, model.config.dropout_rate, training, rng)
    return T.affine(h, w, model.params["classifier.bias"])


def classify(model: DeWiModel, z: Tensor, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """dropout → affine → softmax; rows lie on the probability simplex."""
    return T.softmax(logits(model, z, mode, rng))


def predict(model: DeWiModel, images: Tensor, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class probabilities for a stack of images."""
    out = []
    with T.no_grad():
        for s in range(0, images.shape[0], batch_size):
            chunk = Tensor(images.data[s:s + batch_size])
            out.append(classify(model, embed(model, chunk, "eval"), "eval").data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.num_classes))


def config_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["input_size"] = list(config.input_size)
    d["low_pool"] = list(config.low_pool)
    return d
