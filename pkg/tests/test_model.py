"""Network wiring, shapes and gradient flow."""

import logging

import numpy as np
import pytest

from dewi import losses
from dewi import tensor as T
from dewi.model import (ModelConfig, build_model, classify, desk_model_config, embed, logits,
                        paper_model_config, predict, stage_extents)
from dewi.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def desk():
    return build_model(desk_model_config(), np.random.default_rng(0))


def images(B, size=32, seed=0):
    return Tensor(np.random.default_rng(seed).random((B, 3, size, size)))


class TestConfig:
    def test_paper_preset_widths(self):
        cfg = paper_model_config()
        assert cfg.stage_widths[-1] == 2048
        assert cfg.projector_dim == 4096
        assert cfg.embedding_dim == 8192
        assert cfg.low_feature_dim == 2048
        assert cfg.num_classes == 102

    def test_single_projector_same_width(self):
        assert paper_model_config(single_projector=True).embedding_dim == paper_model_config().embedding_dim

    def test_paper_preset_geometry_survives(self):
        extents = stage_extents(paper_model_config())
        assert extents[-1] == (6, 6)

    @pytest.mark.parametrize("kw", [dict(base_width=0), dict(projector_dim=0), dict(num_classes=1),
                                    dict(block="dense"), dict(dropout_rate=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_too_small_input_names_stage(self):
        with pytest.raises(ValueError, match="stage 4"):
            build_model(ModelConfig(input_size=(8, 8)))


class TestBuild:
    def test_desk_classifier_width(self, desk):
        assert desk.params["classifier.weight"].shape == (4, 128)

    def test_projectors_disjoint_same_topology(self, desk):
        low = {n[len("low_proj."):]: p for n, p in desk.params.items() if n.startswith("low_proj.")}
        high = {n[len("high_proj."):]: p for n, p in desk.params.items() if n.startswith("high_proj.")}
        assert set(low) == set(high)
        for k in ("fc2.weight", "fc3.weight", "fc3.bias"):
            assert low[k].shape == high[k].shape
            assert low[k] is not high[k]
            assert not np.shares_memory(low[k].data, high[k].data)

    def test_projector_layers(self, desk):
        for k in ("fc1", "fc2", "fc3"):
            assert desk.params[f"high_proj.{k}.weight"].shape[0] == 64
        assert "high_proj.bn1.scale" in desk.params and "high_proj.bn2.scale" in desk.params
        assert "high_proj.bn3.scale" not in desk.params

    def test_low_tap_widths(self, desk):
        assert desk.params["low_tap.weight"].shape[:2] == (64, 32)

    def test_single_projector_head(self):
        m = build_model(desk_model_config(single_projector=True), np.random.default_rng(0))
        assert m.params["high_proj.fc3.weight"].shape[0] == 128
        assert not any(n.startswith("low_") for n in m.params)

    def test_he_init_and_bn(self, desk):
        w = desk.params["stage4.block0.conv2.weight"].data
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        assert abs(w.std() - np.sqrt(2 / fan_in)) < 0.1 * np.sqrt(2 / fan_in)
        np.testing.assert_array_equal(desk.params["stem.bn.scale"].data, 1.0)
        np.testing.assert_array_equal(desk.params["stem.bn.shift"].data, 0.0)

    def test_seeded_build_repeatable(self):
        a = build_model(desk_model_config(), np.random.default_rng(3))
        b = build_model(desk_model_config(), np.random.default_rng(3))
        for n in a.params:
            assert a.params[n].data.tobytes() == b.params[n].data.tobytes()


class TestEmbed:
    def test_shape(self, desk):
        z = embed(desk, images(3), "train")
        assert z.shape == (3, 128)

    def test_parts(self, desk):
        z, parts = embed(desk, images(2), "train", return_parts=True)
        assert parts["low_in"].shape == (2, 64)
        assert parts["high_in"].shape == (2, 64)
        np.testing.assert_array_equal(z.data, np.hstack([parts["low"].data, parts["high"].data]))

    def test_identical_images_identical_rows(self, desk):
        x = images(1).data
        z = embed(desk, Tensor(np.concatenate([x, x])), "eval")
        assert z.data[0].tobytes() == z.data[1].tobytes()

    def test_eval_pure_function(self, desk):
        before = {k: v.copy() for k, v in desk.buffers.items()}
        a = embed(desk, images(2), "eval").data
        b = embed(desk, images(2), "eval").data
        assert a.tobytes() == b.tobytes()
        for k in before:
            np.testing.assert_array_equal(before[k], desk.buffers[k])

    def test_unset_running_stats_warn(self, caplog):
        m = build_model(desk_model_config(), np.random.default_rng(0))
        with caplog.at_level(logging.WARNING):
            embed(m, images(1), "eval")
        assert "never-updated" in caplog.text

    def test_wrong_image_shape(self, desk):
        with pytest.raises(ShapeError):
            embed(desk, images(1, size=16), "eval")

    def test_bad_mode(self, desk):
        with pytest.raises(ValueError):
            embed(desk, images(1), "test")


class TestClassify:
    def test_zero_weights_uniform(self):
        m = build_model(desk_model_config(), np.random.default_rng(0))
        m.params["classifier.weight"].data[...] = 0.0
        m.params["classifier.bias"].data[...] = 0.0
        p = classify(m, Tensor(np.random.default_rng(1).normal(size=(3, 128))), "eval")
        np.testing.assert_allclose(p.data, 0.25, atol=1e-15)

    def test_eval_deterministic(self, desk):
        z = Tensor(np.random.default_rng(2).normal(size=(4, 128)))
        assert classify(desk, z, "eval").data.tobytes() == classify(desk, z, "eval").data.tobytes()

    def test_train_dropout_varies_on_simplex(self, desk):
        z = Tensor(np.random.default_rng(3).normal(size=(4, 128)))
        rng = np.random.default_rng(4)
        outs = [classify(desk, z, "train", rng).data for _ in range(100)]
        for p in outs:
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(p > 0)
        assert len({o.tobytes() for o in outs}) > 1

    def test_width_mismatch(self, desk):
        with pytest.raises(ShapeError):
            logits(desk, Tensor(np.zeros((2, 64))), "eval")

    def test_predict_batches_agree(self, desk):
        x = images(5, seed=5)
        np.testing.assert_allclose(predict(desk, x, batch_size=2), predict(desk, x, batch_size=5),
                                   atol=1e-14)


def test_every_parameter_receives_gradient():
    m = build_model(desk_model_config(), np.random.default_rng(0))
    labels = np.eye(4)[[0, 0, 1, 1, 2, 3]]
    z = embed(m, images(6, seed=6), "train")
    probs = classify(m, z, "train", np.random.default_rng(0))
    loss = losses.deep_total_loss(losses.cross_entropy(probs, labels), losses.triplet_margin_loss(z, labels))
    T.backward(loss)
    dead = [n for n, p in m.params.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []
