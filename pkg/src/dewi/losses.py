"""Training objectives: batch-hard triplet margin loss, cross-entropy, the Deep-step
total, and the NTXent / Circle replacements used in ablations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class TripletConfig:
    margin: float = 0.2
    distance: str = "euclidean"

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be nonnegative, got {self.margin}")
        if self.distance != "euclidean":
            raise ValueError(f"unsupported distance {self.distance!r}")


@dataclass
class DeepLossWeights:
    beta1: float = 1.0
    beta2: float = 1.0

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self.beta1}, {self.beta2}")


@dataclass
class MiningResult:
    """Per-anchor hardest positive / hardest negative indices; -1 where undefined."""

    positive: np.ndarray
    negative: np.ndarray
    valid: np.ndarray

    @property
    def any_valid(self) -> bool:
        return bool(self.valid.any())


def class_indices(labels) -> np.ndarray:
    """Integer class per row; rejects soft (mixed) label rows."""
    lab = np.asarray(labels)
    if lab.ndim == 1:
        return lab.astype(int)
    if lab.ndim != 2:
        raise ValueError(f"labels must be a vector of indices or a B×K matrix, got shape {lab.shape}")
    onehot = np.all((lab == 0) | (lab == 1), axis=1) & (lab.sum(axis=1) == 1)
    if not onehot.all():
        bad = int(np.flatnonzero(~onehot)[0])
        raise ValueError(f"labels must be one-hot; row {bad} is {lab[bad].tolist()}")
    return lab.argmax(axis=1)


def pairwise_euclidean(Z: Tensor) -> Tensor:
    """B×B Euclidean distances; the gradient at a zero distance is taken as 0."""
    Z = T.as_tensor(Z)
    diff = Z.data[:, None, :] - Z.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    unit = np.divide(diff, dist[..., None], out=np.zeros_like(diff), where=dist[..., None] > 0)

    def bw(g):
        return (np.einsum("ij,ijd->id", g + g.T, unit),)

    return T.make_op("pairwise_euclidean", dist, (Z,), bw)


def batch_hard_mine(dist, labels) -> MiningResult:
    """Per anchor t: the farthest same-class sample (t itself included) and the
    nearest different-class sample. Anchors with no negative are invalid."""
    d = dist.data if isinstance(dist, Tensor) else np.asarray(dist, dtype=float)
    y = class_indices(labels)
    same = y[:, None] == y[None, :]
    pos = np.where(same, d, -np.inf).argmax(axis=1)
    has_neg = (~same).any(axis=1)
    neg = np.where(~same, d, np.inf).argmin(axis=1)
    neg = np.where(has_neg, neg, -1)
    return MiningResult(positive=pos, negative=neg, valid=has_neg)


def triplet_margin_loss(Z: Tensor, labels, config: TripletConfig = None, return_mining: bool = False):
    """Σ_t [m + D(z_t, z_p*) − D(z_t, z_n*)]_+ over valid anchors (sum, not mean).

    Returns a zero scalar when no anchor has a negative; pass ``return_mining``
    to also get the :class:`MiningResult` (its ``any_valid`` is the flag).
    """
    config = config or TripletConfig()
    dist = pairwise_euclidean(Z)
    mining = batch_hard_mine(dist, labels)
    if not mining.any_valid:
        loss = T.tsum(T.mul(dist, 0.0))
    else:
        a = np.flatnonzero(mining.valid)
        dp = T.index(dist, (a, mining.positive[a]))
        dn = T.index(dist, (a, mining.negative[a]))
        loss = T.tsum(T.relu(T.add(T.sub(dp, dn), config.margin)))
    return (loss, mining) if return_mining else loss


def _check_simplex(targets: np.ndarray, K: int) -> None:
    if targets.ndim != 2 or targets.shape[1] != K:
        raise ValueError(f"targets of shape {targets.shape} do not match B×{K}")
    bad = (targets < 0).any(axis=1) | (np.abs(targets.sum(axis=1) - 1.0) > 1e-9)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ValueError(f"target row {row} is not on the simplex: {targets[row].tolist()}")


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Batch mean of −Σ_k target_k log(prob_k); targets may be soft (Mixup) rows."""
    targets = np.asarray(targets, dtype=float)
    _check_simplex(targets, probs.shape[1])
    per_row = T.tsum(T.mul(T.log(probs), targets), axis=1)
    return T.mul(T.tsum(per_row), -1.0 / probs.shape[0])


def deep_total_loss(ce, triplet, weights: DeepLossWeights = None):
    weights = weights or DeepLossWeights()
    return weights.beta1 * ce + weights.beta2 * triplet


def _row_normalize(Z: Tensor, eps: float = 1e-12) -> Tensor:
    norms = T.sqrt(T.tsum(T.mul(Z, Z), axis=1, keepdims=True))
    return T.div(Z, T.clamp_min(norms, eps))


def cosine_similarity(Z: Tensor) -> Tensor:
    Zn = _row_normalize(T.as_tensor(Z))
    return T.matmul(Zn, T.transpose(Zn))


def ntxent_loss(Z: Tensor, labels, temperature: float = 0.07, return_count: bool = False):
    """Supervised NTXent: mean over ordered same-class pairs (i, j), i ≠ j, of
    −log softmax_{k≠i}(sim(i, k)/τ)[j]."""
    y = class_indices(labels)
    B = len(y)
    off = ~np.eye(B, dtype=bool)
    pos = (y[:, None] == y[None, :]) & off
    npairs = int(pos.sum())
    S = T.mul(cosine_similarity(Z), 1.0 / temperature)
    if npairs == 0:
        loss = T.tsum(T.mul(S, 0.0))
    else:
        lse = T.masked_logsumexp(S, off, axis=1)
        per_anchor = pos.sum(axis=1).astype(float)
        total = T.sub(T.tsum(T.mul(lse, per_anchor)), T.tsum(T.mul(S, pos.astype(float))))
        loss = T.mul(total, 1.0 / npairs)
    return (loss, npairs) if return_count else loss


def circle_loss(Z: Tensor, labels, relaxation: float = 0.4, scale: float = 80.0,
                return_count: bool = False, detach_weights: bool = True,
                weight_similarity: Optional[np.ndarray] = None):
    """Pair-based Circle loss on in-batch cosine similarities, averaged over anchors.

    Per anchor: log(1 + Σ_n exp(γ α_n (s_n − Δ_n)) · Σ_p exp(−γ α_p (s_p − Δ_p)))
    with α_p = [1 + m − s_p]_+, α_n = [s_n + m]_+, Δ_p = 1 − m, Δ_n = m.
    The α weights are constants in backward unless ``detach_weights`` is False;
    ``weight_similarity`` supplies the similarities they are computed from.
    """
    y = class_indices(labels)
    B = len(y)
    off = ~np.eye(B, dtype=bool)
    same = y[:, None] == y[None, :]
    pos, neg = same & off, ~same
    anchors = np.flatnonzero(pos.any(axis=1) & neg.any(axis=1))
    S = cosine_similarity(Z)
    if anchors.size == 0:
        loss = T.tsum(T.mul(S, 0.0))
        return (loss, 0) if return_count else loss
    m, gamma = relaxation, scale
    if detach_weights:
        s = S.data if weight_similarity is None else np.asarray(weight_similarity)
        alpha_p = np.maximum(1.0 + m - s, 0.0)
        alpha_n = np.maximum(s + m, 0.0)
    else:
        alpha_p = T.clamp_min(T.sub(1.0 + m, S), 0.0)
        alpha_n = T.clamp_min(T.add(S, m), 0.0)
    logit_p = T.mul(T.mul(T.sub(S, 1.0 - m), alpha_p), -gamma)
    logit_n = T.mul(T.mul(T.sub(S, m), alpha_n), gamma)
    lse = T.add(T.masked_logsumexp(logit_p, pos, axis=1), T.masked_logsumexp(logit_n, neg, axis=1))
    per_anchor = T.softplus(T.index(lse, anchors))
    loss = T.mul(T.tsum(per_anchor), 1.0 / anchors.size)
    return (loss, int(anchors.size)) if return_count else loss
