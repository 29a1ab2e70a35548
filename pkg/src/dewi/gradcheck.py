"""Finite-difference suite covering every differentiable primitive and the
composite Deep-step loss through the full network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import losses
from . import tensor as T
from .model import ModelConfig, build_model, classify, embed
from .tensor import Tensor, relative_error

STEP = 1e-6
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    """Worst relative error; ``unresolved`` counts coordinates whose derivative
    is below the difference quotient's round-off resolution (compared in
    absolute terms instead, worst excess over the bound in ``max_abs_excess``)."""

    name: str
    points: int
    max_rel_error: float
    unresolved: int = 0
    max_abs_excess: float = 0.0

    def passed(self, tolerance: float = TOLERANCE) -> bool:
        return self.max_rel_error < tolerance and self.max_abs_excess <= 0.0


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _distinct_clusters(rng, B=6, D=3, K=3):
    """Embeddings and labels whose hardest pairs are unique and hinges well away from 0."""
    while True:
        y = np.arange(B) % K
        Z = rng.normal(size=(B, D))
        d = np.sqrt(((Z[:, None] - Z[None]) ** 2).sum(-1))
        same = y[:, None] == y[None]
        ok = True
        for t in range(B):
            dp = np.sort(d[t][same[t]])[::-1]
            dn = np.sort(d[t][~same[t]])
            if (len(dp) > 1 and dp[0] - dp[1] < 1e-3) or (len(dn) > 1 and dn[1] - dn[0] < 1e-3):
                ok = False
            if abs(0.2 + dp[0] - dn[0]) < 1e-3:
                ok = False
        if ok:
            return Z, np.eye(K)[y]


def primitive_cases() -> dict:
    """name → (f, point sampler)."""
    c = {}
    shift = np.random.default_rng(10).normal(size=(3, 4))
    c["add"] = (lambda x: T.tsum(T.mul(T.add(x, shift), x)), lambda r: r.normal(size=(3, 4)))
    c["sub_div"] = (lambda x: T.tsum(T.div(T.sub(x, 0.3), T.add(T.mul(x, x), 1.0))), lambda r: r.normal(size=(5,)))
    c["exp_log"] = (lambda x: T.tsum(T.log(T.add(T.exp(x), 0.5))), lambda r: r.normal(size=(4, 2)))
    c["sqrt"] = (lambda x: T.tsum(T.sqrt(x)), lambda r: r.uniform(0.2, 2.0, size=(6,)))
    c["softplus"] = (lambda x: T.tsum(T.mul(T.softplus(x), x)), lambda r: 3 * r.normal(size=(6,)))
    c["relu"] = (lambda x: T.tsum(T.mul(T.relu(x), x)), lambda r: _away_from_zero(r, (4, 5)))
    c["clamp_min"] = (lambda x: T.tsum(T.mul(T.clamp_min(x, 0.05), x)), lambda r: 0.05 + _away_from_zero(r, (7,)))
    c["matmul"] = (lambda x: T.tsum(T.mul(T.matmul(x, T.transpose(x)), T.matmul(x, T.transpose(x)))),
                   lambda r: r.normal(size=(3, 4)))
    c["index"] = (lambda x: T.tsum(T.mul(T.index(x, (np.array([0, 2, 2]), np.array([1, 0, 0]))), 2.0))
                  + T.tsum(T.mul(x, x)), lambda r: r.normal(size=(3, 3)))
    c["concat_split"] = (lambda x: T.tsum(T.mul(T.concat(T.split(x, [2, 3], axis=1)[::-1], axis=1),
                                                np.arange(15.0).reshape(3, 5))), lambda r: r.normal(size=(3, 5)))
    mask = np.array([[True, False, True, True], [False, True, True, False], [True, True, True, True]])
    c["masked_logsumexp"] = (lambda x: T.tsum(T.mul(T.masked_logsumexp(x, mask), np.array([1.0, -2.0, 0.5]))),
                             lambda r: r.normal(size=(3, 4)))
    w_aff = np.random.default_rng(11).normal(size=(3, 5))

    def affine_f(x):
        w = T.reshape(T.index(x, slice(0, 15)), (3, 5))
        b = T.index(x, slice(15, 18))
        inp = T.reshape(T.index(x, slice(18, 28)), (2, 5))
        return T.tsum(T.mul(T.affine(inp, w, b), T.affine(inp, Tensor(w_aff))))

    c["affine"] = (affine_f, lambda r: r.normal(size=(28,)))

    def conv_f(x):
        inp = T.reshape(T.index(x, slice(0, 2 * 2 * 5 * 5)), (2, 2, 5, 5))
        w = T.reshape(T.index(x, slice(100, 100 + 3 * 2 * 3 * 3)), (3, 2, 3, 3))
        b = T.index(x, slice(154, 157))
        out = T.conv2d(inp, w, b, stride=2, padding=1)
        return T.tsum(T.mul(out, out))

    c["conv2d"] = (conv_f, lambda r: r.normal(size=(157,)))
    weights4 = np.random.default_rng(12).normal(size=(4, 3, 2, 2))

    def bn4_f(x):
        inp = T.reshape(T.index(x, slice(0, 48)), (4, 3, 2, 2))
        sc, sh = T.index(x, slice(48, 51)), T.index(x, slice(51, 54))
        out = T.batch_norm(inp, sc, sh, np.zeros(3), np.ones(3), training=True)
        return T.tsum(T.mul(out, weights4))

    c["batch_norm_4d"] = (bn4_f, lambda r: r.normal(size=(54,)))
    weights2 = np.random.default_rng(13).normal(size=(5, 3))

    def bn2_f(x):
        inp = T.reshape(T.index(x, slice(0, 15)), (5, 3))
        sc, sh = T.index(x, slice(15, 18)), T.index(x, slice(18, 21))
        out = T.batch_norm(inp, sc, sh, np.zeros(3), np.ones(3), training=True)
        return T.tsum(T.mul(T.mul(out, out), weights2))

    c["batch_norm_2d"] = (bn2_f, lambda r: r.normal(size=(21,)))
    weights_sm = np.random.default_rng(14).normal(size=(3, 4))
    c["softmax"] = (lambda x: T.tsum(T.mul(T.softmax(x), weights_sm)), lambda r: r.normal(size=(3, 4)))
    c["dropout"] = (lambda x: T.tsum(T.mul(T.dropout(x, 0.5, True, np.random.default_rng(5)), x)),
                    lambda r: r.normal(size=(4, 4)))
    weights_pool = np.random.default_rng(15).normal(size=(2, 2, 2, 3))
    c["pool_adaptive"] = (lambda x: T.tsum(T.mul(T.pool_avg(x, (2, 3)), weights_pool)),
                          lambda r: r.normal(size=(2, 2, 5, 7)))
    c["pool_global"] = (lambda x: T.tsum(T.mul(T.pool_avg(x, "global"), weights_pool[:, :, 0, 0])),
                        lambda r: r.normal(size=(2, 2, 3, 3)))
    c["pairwise_euclidean"] = (lambda x: T.tsum(T.mul(losses.pairwise_euclidean(x), np.arange(25.0).reshape(5, 5))),
                               lambda r: r.normal(size=(5, 3)))
    targets = np.array([[0.3, 0.7, 0.0], [1.0, 0.0, 0.0], [0.0, 0.5, 0.5]])
    c["softmax_cross_entropy"] = (lambda x: losses.cross_entropy(T.softmax(x), targets),
                                  lambda r: r.normal(size=(3, 3)))
    cluster_labels = {}

    def triplet_f(x):
        return losses.triplet_margin_loss(x, cluster_labels["y"], losses.TripletConfig(0.2))

    def triplet_point(r):
        Z, y = _distinct_clusters(r)
        cluster_labels["y"] = y
        return Z

    c["triplet"] = (triplet_f, triplet_point)
    y_c = np.eye(3)[[0, 1, 2, 0, 1, 2]]
    c["ntxent"] = (lambda x: losses.ntxent_loss(x, y_c, 0.5), lambda r: r.normal(size=(6, 4)))
    c["circle"] = (lambda x: losses.circle_loss(x, y_c, 0.4, 2.0, detach_weights=False),
                   lambda r: r.normal(size=(6, 4)))
    frozen = {}

    def circle_frozen_f(x):
        # detached weights: differentiate with the weighting similarities held at the point
        return losses.circle_loss(x, y_c, 0.4, 2.0, weight_similarity=frozen["s"])

    def circle_frozen_point(r):
        Z = r.normal(size=(6, 4))
        frozen["s"] = losses.cosine_similarity(Tensor(Z)).data
        return Z

    c["circle_detached"] = (circle_frozen_f, circle_frozen_point)
    return c


def check_primitives(points: int = 100, seed: int = 0, names: Optional[list] = None) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for name, (f, sampler) in primitive_cases().items():
        if names is not None and name not in names:
            continue
        worst = 0.0
        for _ in range(points):
            rep = T.grad_check(f, sampler(rng), STEP, TOLERANCE)
            worst = max(worst, rep.max_rel_error)
        results.append(CheckResult(name, points, worst))
    return results


# ---------------------------------------------------------------------------
# composite


TINY = dict(input_channels=3, input_size=(16, 16), base_width=2, projector_dim=4, num_classes=2,
            dropout_rate=0.5)


def deep_step_loss(model, images: np.ndarray, labels: np.ndarray, dropout_seed: int) -> Tensor:
    """β1·CE + β2·triplet through both projectors, with a fixed dropout mask."""
    z = embed(model, Tensor(images), "train")
    probs = classify(model, z, "train", np.random.default_rng(dropout_seed))
    return losses.deep_total_loss(losses.cross_entropy(probs, labels), losses.triplet_margin_loss(z, labels))


@dataclass
class ParamCheck:
    rel_error: float
    unresolved: int
    abs_excess: float


def roundoff_bound(value: float, step: float = STEP) -> float:
    """Absolute round-off error of a central difference of a float64 function
    near ``value`` (a few ulps of f divided by 2·step)."""
    return 8 * np.finfo(np.float64).eps * max(abs(value), 1.0) / (2 * step)


def check_params(loss_fn: Callable[[], Tensor], params: dict, step: float = STEP,
                 coords_per_param: Optional[int] = None, rng=None,
                 tolerance: float = TOLERANCE) -> dict:
    """Central differences on parameter coordinates (all, or a random sample per tensor).

    Coordinates with |a| + |n| below ``roundoff_bound / tolerance`` cannot be
    resolved to the relative tolerance at this step; they must instead agree
    within the round-off bound. Returns name → :class:`ParamCheck`.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    T.backward(loss)
    bound = roundoff_bound(loss.item(), step)
    out = {}
    with T.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            if coords_per_param is None or coords_per_param >= flat.size:
                idx = np.arange(flat.size)
            else:
                idx = rng.choice(flat.size, size=coords_per_param, replace=False)
            analytic = p.grad.reshape(-1)[idx]
            numeric = np.empty(idx.size)
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = hi = orig + step
                fp = loss_fn().item()
                flat[i] = lo = orig - step
                fm = loss_fn().item()
                flat[i] = orig
                numeric[k] = (fp - fm) / (hi - lo)
            finite = np.isfinite(analytic) & np.isfinite(numeric)
            small = finite & (np.abs(analytic) + np.abs(numeric) < bound / tolerance)
            err = relative_error(analytic, numeric)
            err[~finite] = np.inf
            excess = np.abs(analytic - numeric)[small] - bound
            out[name] = ParamCheck(float(err[~small].max(initial=0.0)), int(small.sum()),
                                   float(excess.max(initial=-np.inf)))
    return out


def composite_point(rng, config: Optional[ModelConfig] = None, kink_margin: float = 1e-4):
    """A tiny model, a 4-sample batch and a dropout seed at which the Deep-step
    loss is smooth and well resolved by central differences: unique hardest
    pairs, hinge and ReLU inputs at least ``kink_margin`` from their kinks, a
    dropout mask keeping every embedding column for some sample, and class
    probabilities above 1e-3 and no batch-norm shift with a vanishing
    gradient. A shift vanishes when the ReLU pattern after it moves the next
    normalization's input uniformly across the batch; the loss is then exactly
    invariant along it. A fully dropped column has an exactly zero
    gradient and a saturated softmax leaves gradients near the round-off floor
    of the difference quotient, so none of these say anything about correctness."""
    config = config or ModelConfig(**TINY)
    labels = np.eye(config.num_classes)[[0, 0, 1, 1]]
    y = labels.argmax(1)
    same = y[:, None] == y[None]
    while True:
        model = build_model(config, rng)
        images = rng.random((4, config.input_channels, *config.input_size))
        dseed = int(rng.integers(1 << 30))
        keep = np.random.default_rng(dseed).random((4, config.embedding_dim)) >= config.dropout_rate
        if not keep.any(axis=0).all():
            continue
        with T.no_grad(), T.watch_relu() as margins:
            z = embed(model, Tensor(images), "train")
            probs = classify(model, z, "train", np.random.default_rng(dseed)).data
        d = losses.pairwise_euclidean(z).data
        hinge = [0.2 + d[t][same[t]].max() - d[t][~same[t]].min() for t in range(4)]
        gaps = [np.diff(np.sort(d[t][~same[t]])).min() for t in range(4)]
        if not (min(margins) > kink_margin and probs.min() > 1e-3
                and min(abs(h) for h in hinge) > 1e-3 and min(gaps) > 1e-3):
            continue
        model.zero_grad()
        T.backward(deep_step_loss(model, images, labels, dseed))
        shift_grads = [p.grad for n, p in model.params.items() if n.endswith(".shift")]
        model.zero_grad()
        if min(np.abs(gr).min() for gr in shift_grads) > 1e-9:
            return model, images, labels, dseed


def check_composite(points: int = 100, seed: int = 0, coords_per_param: Optional[int] = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, unresolved, excess = 0.0, 0, -np.inf
    for _ in range(points):
        model, images, labels, dseed = composite_point(rng)
        checks = check_params(lambda: deep_step_loss(model, images, labels, dseed), model.params,
                              coords_per_param=coords_per_param, rng=rng)
        for c in checks.values():
            worst = max(worst, c.rel_error)
            unresolved += c.unresolved
            excess = max(excess, c.abs_excess)
    return CheckResult("deep_step_composite", points, worst, unresolved, excess)


def run_suite(points: int = 100, seed: int = 0, composite_points: Optional[int] = None) -> list:
    results = check_primitives(points, seed)
    results.append(check_composite(points if composite_points is None else composite_points, seed))
    return results
