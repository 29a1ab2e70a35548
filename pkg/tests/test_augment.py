"""Mixup sampling and the geometric image pipeline."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dewi.augment import (MixupConfig, TransformSpec, apply_transforms, center_offsets,
                          mixup_batch, sample_lambda)


def onehot(labels, K):
    return np.eye(K)[labels]


class TestSampleLambda:
    def test_uniform_at_alpha_one(self):
        """Beta(1, 1) is uniform: KS distance to U(0,1) over 1e5 draws stays below 0.01."""
        rng = np.random.default_rng(0)
        draws = np.array([sample_lambda(MixupConfig(1.0), rng) for _ in range(100_000)])
        assert stats.kstest(draws, "uniform").statistic < 0.01
        assert abs(draws.mean() - 0.5) < 0.005

    @pytest.mark.parametrize("alpha", [0.5, 2.0])
    def test_ablation_alphas(self, alpha):
        rng = np.random.default_rng(1)
        draws = np.array([sample_lambda(MixupConfig(alpha), rng) for _ in range(20_000)])
        assert draws.min() >= 0 and draws.max() <= 1
        assert stats.kstest(draws, stats.beta(alpha, alpha).cdf).statistic < 0.02

    @pytest.mark.parametrize("alpha", [0.0, -1.0])
    def test_nonpositive_alpha(self, alpha):
        with pytest.raises(ValueError):
            MixupConfig(alpha)

    def test_default_alpha(self):
        assert MixupConfig().alpha == 1.0


class TestMixupBatch:
    def setup_method(self):
        rng = np.random.default_rng(2)
        self.x = rng.random((6, 3, 4, 4))
        self.y = onehot([0, 1, 2, 0, 1, 2], 3)

    def test_lambda_one_identity(self):
        xm, ym, lam, _ = mixup_batch(self.x, self.y, MixupConfig(), np.random.default_rng(0), lam=1.0)
        assert xm.tobytes() == self.x.tobytes() and ym.tobytes() == self.y.tobytes()

    def test_lambda_zero_partner(self):
        xm, ym, _, partner = mixup_batch(self.x, self.y, MixupConfig(), np.random.default_rng(0), lam=0.0)
        assert xm.tobytes() == self.x[partner].tobytes()
        assert ym.tobytes() == self.y[partner].tobytes()

    def test_partner_is_permutation(self):
        _, _, _, partner = mixup_batch(self.x, self.y, MixupConfig(), np.random.default_rng(3))
        assert sorted(partner) == list(range(6))

    def test_same_class_keeps_label(self):
        y = onehot([1] * 6, 3)
        _, ym, lam, _ = mixup_batch(self.x, y, MixupConfig(), np.random.default_rng(4))
        assert 0 < lam < 1
        np.testing.assert_array_equal(ym, y)

    def test_exact_convex_combination(self):
        xm, ym, lam, j = mixup_batch(self.x, self.y, MixupConfig(), np.random.default_rng(5))
        np.testing.assert_allclose(ym - lam * self.y - (1 - lam) * self.y[j], 0, atol=1e-15)
        np.testing.assert_allclose(xm - lam * self.x - (1 - lam) * self.x[j], 0, atol=1e-15)

    def test_simplex_over_many_mixes(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            labels = rng.integers(0, 5, size=8)
            _, ym, _, _ = mixup_batch(np.zeros((8, 1)), onehot(labels, 5), MixupConfig(), rng)
            assert np.all(np.abs(ym.sum(axis=1) - 1) < 1e-12)
            assert ym.min() >= 0 and ym.max() <= 1

    def test_batch_of_one_unchanged(self):
        xm, ym, lam, _ = mixup_batch(self.x[:1], self.y[:1], MixupConfig(), np.random.default_rng(0))
        assert lam == 1.0 and xm.tobytes() == self.x[:1].tobytes()

    def test_seeded_deterministic(self):
        a = mixup_batch(self.x, self.y, MixupConfig(), np.random.default_rng(9))
        b = mixup_batch(self.x, self.y, MixupConfig(), np.random.default_rng(9))
        assert a[0].tobytes() == b[0].tobytes() and a[2] == b[2]

    def test_size_unchanged(self):
        xm, ym, _, _ = mixup_batch(self.x, self.y, MixupConfig(), np.random.default_rng(0))
        assert xm.shape == self.x.shape and ym.shape == self.y.shape

    def test_label_count_mismatch(self):
        with pytest.raises(ValueError):
            mixup_batch(self.x, self.y[:5], MixupConfig(), np.random.default_rng(0))


class TestTransforms:
    def img(self, h, w, c=3, seed=0):
        return np.random.default_rng(seed).integers(0, 256, size=(h, w, c), dtype=np.uint8)

    def test_identity_without_flip_or_crop(self):
        im = self.img(12, 12)
        spec = TransformSpec(resize=(12, 12), crop_size=(12, 12), hflip_prob=0.0)
        out = apply_transforms(im, spec, "train", np.random.default_rng(0))
        np.testing.assert_array_equal(out, im.transpose(2, 0, 1) / 255.0)

    def test_center_crop_border(self):
        assert center_offsets((400, 400), (384, 384)) == (8, 8)
        im = self.img(40, 40)
        spec = TransformSpec(resize=(40, 40), crop_size=(24, 24))
        out = apply_transforms(im, spec, "eval")
        np.testing.assert_array_equal(out, im[8:32, 8:32].transpose(2, 0, 1) / 255.0)

    def test_eval_none_only_resizes(self):
        im = self.img(20, 20)
        spec = TransformSpec(resize=(20, 20), crop_size=(16, 16), eval_crop="none")
        out = apply_transforms(im, spec, "eval")
        assert out.shape == (3, 20, 20)
        np.testing.assert_array_equal(out, im.transpose(2, 0, 1) / 255.0)

    def test_flip_always(self):
        im = self.img(8, 8)
        spec = TransformSpec(resize=None, crop_size=None, hflip_prob=1.0)
        out = apply_transforms(im, spec, "train", np.random.default_rng(0))
        np.testing.assert_array_equal(out, im[:, ::-1].transpose(2, 0, 1) / 255.0)

    def test_random_crop_is_a_window(self):
        im = self.img(20, 20)
        spec = TransformSpec(resize=None, crop_size=(10, 10), hflip_prob=0.0)
        out = (apply_transforms(im, spec, "train", np.random.default_rng(1)) * 255).round().astype(np.uint8)
        windows = [im[t:t + 10, l:l + 10].transpose(2, 0, 1) for t in range(11) for l in range(11)]
        assert any(np.array_equal(out, w) for w in windows)

    def test_too_small_rejected(self):
        spec = TransformSpec(resize=None, crop_size=(16, 16))
        with pytest.raises(ValueError):
            apply_transforms(self.img(10, 10), spec, "eval")

    def test_crop_larger_than_resize_rejected(self):
        with pytest.raises(ValueError):
            TransformSpec(resize=(10, 10), crop_size=(12, 12))

    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(8, 40), w=st.integers(8, 40), c=st.sampled_from([1, 3]),
           phase=st.sampled_from(["train", "eval"]), seed=st.integers(0, 1000))
    def test_output_size_and_channels(self, h, w, c, phase, seed):
        spec = TransformSpec(resize=(24, 20), crop_size=(16, 12))
        out = apply_transforms(self.img(h, w, c, seed), spec, phase, np.random.default_rng(seed))
        assert out.shape == (c, 16, 12)
        assert out.min() >= 0 and out.max() <= 1
