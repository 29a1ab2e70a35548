"""Schedule, optimizer, Deep/Wide alternation, determinism and resumption."""

import dataclasses

import numpy as np
import pytest

from dewi import losses
from dewi.augment import desk_transforms
from dewi.checkpoint import load_checkpoint, save_checkpoint
from dewi.data import Batch, SplitSpec, split_dataset, synth_dataset
from dewi.model import ModelConfig, build_model
from dewi.tensor import Tensor
from dewi.trainer import (NonFiniteGradient, TrainConfig, TrainerState, TrainingDiverged, fit,
                          lr_at_epoch, sgd_update, train_iteration)

SMALL = ModelConfig(input_size=(16, 16), base_width=2, projector_dim=4, num_classes=3)


def small_model(seed=0, **kw):
    return build_model(dataclasses.replace(SMALL, **kw), np.random.default_rng(seed))


@pytest.fixture(scope="module")
def splits():
    return split_dataset(synth_dataset(3, 10, 16, seed=0), SplitSpec())


def cfg(**kw):
    base = dict(epochs=2, batch_size=6, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def params_bytes(model):
    return {n: p.data.tobytes() for n, p in model.params.items()}


class TestSchedule:
    def test_default_values(self):
        c = TrainConfig()
        assert lr_at_epoch(c, 0) == 3e-3
        assert lr_at_epoch(c, 14) == 3e-3
        assert lr_at_epoch(c, 15) == 2.7e-3
        assert lr_at_epoch(c, 10 ** 6) == 3e-7

    def test_nonincreasing_and_floored(self):
        c = TrainConfig()
        lrs = [lr_at_epoch(c, e) for e in range(0, 2000, 7)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert min(lrs) >= c.min_lr

    def test_pretext_start(self):
        c = TrainConfig()
        assert lr_at_epoch(c, 0, initial=c.pretext_lr) == 3e-4

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at_epoch(TrainConfig(), -1)

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(mode="both"), dict(batch_size=0),
                                    dict(momentum=-0.1), dict(contrastive="arcface")])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestSGD:
    def param(self, data, grad):
        t = Tensor(np.array(data, dtype=float), requires_grad=True)
        t.grad = np.array(grad, dtype=float)
        return t

    def test_zero_grad_no_decay(self):
        p = self.param([1.0, -2.0], [0.0, 0.0])
        sgd_update([("p", p)], TrainerState(), 0.1, 0.9, 0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_plain_step(self):
        p = self.param([1.0, -2.0], [0.5, 0.25])
        sgd_update([("p", p)], TrainerState(), 0.1, 0.0, 0.0)
        np.testing.assert_allclose(p.data, [1.0 - 0.05, -2.0 - 0.025], atol=1e-15)

    def test_momentum_unroll(self):
        """Two steps on a constant gradient move lr·g·(1 + 1.9)."""
        p = self.param([0.0], [2.0])
        state = TrainerState()
        for _ in range(2):
            sgd_update([("p", p)], state, 0.01, 0.9, 0.0)
        assert p.data[0] == pytest.approx(-0.01 * 2.0 * 2.9, rel=1e-14)

    def test_weight_decay_term(self):
        p = self.param([2.0], [0.0])
        sgd_update([("p", p)], TrainerState(), 0.1, 0.0, 0.5)
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_nonfinite_named_and_nothing_applied(self):
        a = self.param([1.0], [1.0])
        b = self.param([1.0], [np.nan])
        with pytest.raises(NonFiniteGradient, match="bad"):
            sgd_update([("a", a), ("bad", b)], TrainerState(), 0.1, 0.9, 0.0)
        assert a.data[0] == 1.0


class TestIteration:
    def batch(self, labels, seed=0):
        x = np.random.default_rng(seed).random((len(labels), 3, 16, 16))
        return Batch(x, np.array(labels), 3)

    def test_alternation_from_deep(self):
        model, state, c = small_model(), TrainerState.fresh(0), cfg()
        for i in range(10):
            train_iteration(model, self.batch([0, 0, 1, 1, 2, 2], i), state, c, 1e-3)
        assert "".join(state.step_tags) == "DWDWDWDWDW"

    @pytest.mark.parametrize("mode,tag", [("deep_only", "D"), ("wide_only", "W"), ("mixup_all", "W")])
    def test_single_step_modes(self, mode, tag):
        model, state, c = small_model(), TrainerState.fresh(0), cfg(mode=mode)
        for i in range(4):
            train_iteration(model, self.batch([0, 0, 1, 1, 2, 2], i), state, c, 1e-3)
        assert state.step_tags == [tag] * 4

    def test_wide_never_calls_triplet(self, monkeypatch):
        calls = []
        real = losses.triplet_margin_loss

        def spy(*a, **k):
            calls.append(1)
            return real(*a, **k)

        monkeypatch.setattr(losses, "triplet_margin_loss", spy)
        model, state, c = small_model(), TrainerState.fresh(0), cfg()
        tags = []
        for i in range(6):
            before = len(calls)
            tags.append(train_iteration(model, self.batch([0, 0, 1, 1, 2, 2], i), state, c, 1e-3)["step"])
            assert (len(calls) > before) == (tags[-1] == "D")

    def test_one_class_batch_flagged(self):
        model, state = small_model(), TrainerState.fresh(0)
        info = train_iteration(model, self.batch([1, 1, 1, 1]), state, cfg(), 1e-3)
        assert info["step"] == "D" and info["contrastive"] == 0.0 and not info["contrastive_valid"]
        assert np.isfinite(info["total"])

    def test_zero_lr_zero_decay_invariant(self):
        model, state = small_model(), TrainerState.fresh(0)
        before = params_bytes(model)
        c = cfg(weight_decay=0.0)
        for i in range(5):
            train_iteration(model, self.batch([0, 0, 1, 1, 2, 2], i), state, c, 0.0)
        assert params_bytes(model) == before

    def test_divergence_reports_position(self, monkeypatch):
        real = losses.cross_entropy
        monkeypatch.setattr(losses, "cross_entropy", lambda *a, **k: real(*a, **k) * float("nan"))
        model, state = small_model(), TrainerState.fresh(0)
        state.epoch, state.iteration = 3, 7
        with pytest.raises(TrainingDiverged, match="epoch 3, iteration 7"):
            train_iteration(model, self.batch([0, 0, 1, 1]), state, cfg(), 1e-3)

    def test_nonfinite_gradient_rejects_step(self):
        model, state = small_model(), TrainerState.fresh(0)
        before = params_bytes(model)
        b = self.batch([0, 0, 1, 1])
        b.images[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteGradient, match="stem.conv.weight"):
            train_iteration(model, b, state, cfg(), 1e-3)
        assert params_bytes(model) == before


class TestFit:
    def test_log_and_best_snapshot(self, splits):
        tr, va, _ = splits
        model, state = fit(small_model(), tr, va, cfg(epochs=3), transforms=desk_transforms(16))
        assert [e.epoch for e in state.log] == [0, 1, 2]
        assert state.best_acc == max(e.val_acc for e in state.log)
        assert abs(state.step_tags.count("D") - state.step_tags.count("W")) <= 1

    def test_deep_turn_carries_over_epochs(self, splits):
        tr, va, _ = splits
        # 21 samples at B=6 → 4 iterations per epoch; with B=7, 3 per epoch
        _, state = fit(small_model(), tr, va, cfg(epochs=2, batch_size=7))
        assert "".join(state.step_tags) == "DWDWDW"

    def test_deterministic(self, splits):
        tr, va, _ = splits
        runs = [fit(small_model(), tr, va, cfg(), transforms=desk_transforms(16)) for _ in range(2)]
        assert runs[0][1].log[-1].val_loss == runs[1][1].log[-1].val_loss
        assert params_bytes(runs[0][0]) == params_bytes(runs[1][0])

    def test_resume_mid_epoch_matches(self, splits, tmp_path):
        tr, va, _ = splits
        c = cfg(epochs=2, restore_best=False)
        t = desk_transforms(16)
        full_model, full_state = fit(small_model(), tr, va, c, transforms=t)
        m, s = fit(small_model(), tr, va, c, transforms=t, stop_after=5)
        assert s.iteration == 1 and s.epoch == 1
        save_checkpoint(m, tmp_path / "mid.dewi", s, c)
        m2, s2, _ = load_checkpoint(tmp_path / "mid.dewi")
        m2, s2 = fit(m2, tr, va, c, state=s2, transforms=t)
        assert s2.last_loss == full_state.last_loss
        assert s2.log[-1].val_loss == full_state.log[-1].val_loss
        assert params_bytes(m2) == params_bytes(full_model)

    def test_empty_rejected(self, splits):
        tr, va, _ = splits
        with pytest.raises(ValueError):
            fit(small_model(), tr, va.subset([]), cfg())


class TestPretext:
    def test_probe_freezes_backbone(self, splits):
        tr, va, _ = splits
        c = cfg(mode="pretext", pretext_epochs=1, probe_epochs=2, restore_best=False)
        m1, s1 = fit(small_model(), tr, va, dataclasses.replace(c, probe_epochs=0))
        body = {n: b for n, b in params_bytes(m1).items() if not n.startswith("classifier.")}
        m2, s2 = fit(m1, tr, va, c, state=s1)
        after = {n: b for n, b in params_bytes(m2).items() if not n.startswith("classifier.")}
        assert body == after
        assert set(s2.step_tags) == {"P", "L"}
        assert [e.stage for e in s2.log] == ["pretext", "probe", "probe"]

    def test_reports_metrics(self, splits):
        tr, va, _ = splits
        c = cfg(mode="pretext", pretext_epochs=1, probe_epochs=1)
        _, state = fit(small_model(), tr, va, c)
        e = state.log[-1]
        assert all(0 <= v <= 1 for v in (e.val_acc, e.val_mf1, e.val_gm))
