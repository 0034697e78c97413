import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from scfusion import gradcheck as gc
from scfusion import ssl
from scfusion.errors import ParameterError, ShapeError


class TestMasking:
    def test_cardinality(self):
        spec = ssl.mask_tokens(16, 0.75, 0)
        assert len(spec.masked) == 12
        assert all(0 <= i < 16 for i in spec.masked)

    def test_deterministic(self):
        assert ssl.mask_tokens(16, 0.75, 7) == ssl.mask_tokens(16, 0.75, 7)

    def test_per_index_frequency(self):
        counts = np.zeros(8)
        for seed in range(1000):
            counts[sorted(ssl.mask_tokens(8, 0.5, seed).masked)] += 1
        assert np.all(np.abs(counts - 500) <= 60), counts

    @pytest.mark.parametrize("n,ratio", [(16, 0.01), (16, 0.99), (1, 0.5), (8, 0.0), (8, 1.0)])
    def test_degenerate_ratios(self, n, ratio):
        with pytest.raises(ParameterError):
            ssl.mask_tokens(n, ratio, 0)

    def test_batch_masks(self):
        m = ssl.random_masks(5, 16, 0.75, np.random.default_rng(0))
        assert m.shape == (5, 16) and np.all(m.sum(axis=1) == 12)


class TestReconstructionLoss:
    def test_zero_case(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        loss, grad = ssl.reconstruction_loss(x, x.copy(), ssl.mask_tokens(4, 0.5, 0))
        assert loss == 0.0 and not grad.any()

    def test_direct_arithmetic(self):
        mask = ssl.MaskSpec(2, frozenset({0}), 0.5)
        p_rec = np.array([[1.0, 2.0], [7.0, 7.0]])
        loss, grad = ssl.reconstruction_loss(p_rec, np.zeros((2, 2)), mask)
        assert loss == 5.0
        np.testing.assert_array_equal(grad, [[2.0, 4.0], [0.0, 0.0]])

    def test_unmasked_tokens_ignored(self):
        rng = np.random.default_rng(1)
        p_rec, p_orig = rng.normal(size=(16, 4)), rng.normal(size=(16, 4))
        mask = ssl.mask_tokens(16, 0.75, 3)
        loss, _ = ssl.reconstruction_loss(p_rec, p_orig, mask)
        visible = ~mask.as_bool()
        p_rec[visible] += rng.normal(0, 100, size=(visible.sum(), 4))
        assert ssl.reconstruction_loss(p_rec, p_orig, mask)[0] == loss

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        t, p = int(rng.integers(2, 17)), int(rng.integers(1, 9))
        p_rec, p_orig = rng.normal(size=(t, p)), rng.normal(size=(t, p))
        mask = ssl.mask_tokens(t, 0.5, seed)
        expected = oracles.reconstruction_loss(p_rec.tolist(), p_orig.tolist(), mask.masked)
        assert abs(ssl.reconstruction_loss(p_rec, p_orig, mask)[0] - expected) <= 1e-12 * max(1.0, expected)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        p_rec, p_orig = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        mask = ssl.mask_tokens(6, 0.5, 2)
        _, grad = ssl.reconstruction_loss(p_rec, p_orig, mask)
        numeric = gc.finite_diff(lambda x: ssl.reconstruction_loss(x, p_orig, mask)[0], p_rec)
        assert gc.check(grad, numeric).passed

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ssl.reconstruction_loss(np.zeros((4, 2)), np.zeros((4, 3)), ssl.mask_tokens(4, 0.5, 0))
        with pytest.raises(ShapeError):
            ssl.reconstruction_loss(np.zeros((4, 2)), np.zeros((4, 2)), ssl.mask_tokens(8, 0.5, 0))


def batch(q, keys, pos=0, tau=1.0):
    return ssl.ContrastiveBatch(np.asarray(q, float), np.asarray(keys, float), pos, tau)


class TestContrastiveLoss:
    def test_symmetry_gives_ln_k(self):
        loss, _ = ssl.contrastive_loss(batch([0.3, -0.2], [[1.0, 2.0]] * 4, pos=2, tau=0.2))
        assert abs(loss - 1.38629436) < 5e-9
        assert abs(loss - math.log(4)) < 1e-10

    def test_two_key_example(self):
        loss, _ = ssl.contrastive_loss(batch([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]))
        assert abs(loss - 0.31326169) < 5e-9

    def test_temperature_folding(self):
        rng = np.random.default_rng(0)
        q, keys = rng.normal(size=4), rng.normal(size=(5, 4))
        a, _ = ssl.contrastive_loss(batch(q, keys, 1, tau=0.3))
        b, _ = ssl.contrastive_loss(batch(q / 0.3, keys, 1, tau=1.0))
        assert abs(a - b) <= 1e-12

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            q, keys = rng.normal(size=6), rng.normal(size=(5, 6))
            pos, tau = int(rng.integers(5)), float(rng.uniform(0.1, 2))
            got, _ = ssl.contrastive_loss(batch(q, keys, pos, tau))
            assert abs(got - oracles.contrastive_loss(q.tolist(), keys.tolist(), pos, tau)) < 1e-10

    def test_decreases_with_positive_similarity(self):
        keys = np.array([[1.0, 0.0], [0.0, 1.0], [-0.5, 0.5]])
        losses = [ssl.contrastive_loss(batch([s, 0.0], keys, 0, 0.5))[0] for s in np.linspace(-2, 2, 9)]
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert min(losses) >= 0

    def test_grad_q_against_finite_differences(self):
        rng = np.random.default_rng(2)
        q, keys = rng.normal(size=5), rng.normal(size=(4, 5))
        _, g = ssl.contrastive_loss(batch(q, keys, 3, 0.2))
        numeric = gc.finite_diff(lambda x: ssl.contrastive_loss(batch(x, keys, 3, 0.2))[0], q)
        assert gc.check(g, numeric).passed

    def test_errors(self):
        with pytest.raises(ParameterError):
            ssl.contrastive_loss(batch([1.0], [[1.0], [0.0]], tau=0.0))
        with pytest.raises(ShapeError):
            ssl.contrastive_loss(batch([1.0], [[1.0]]))
        with pytest.raises(ParameterError):
            ssl.contrastive_loss(batch([1.0], [[1.0], [0.0]], pos=2))

    def test_k_pos_is_in_keys(self):
        b = batch([1.0], [[3.0], [4.0]], pos=1)
        assert b.k_pos[0] == 4.0


class TestBatchInfoNCE:
    def test_identical_embeddings_give_ln_b(self):
        z = np.tile([[0.6, 0.8]], (6, 1))
        loss, g1, g2 = ssl.batch_info_nce(z, z, 0.2)
        assert abs(loss - math.log(6)) < 1e-12

    def test_equals_mean_of_single_query_losses(self):
        rng = np.random.default_rng(3)
        z1, z2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        terms = [ssl.info_nce(z1[i], z2, i, 0.5)[0] for i in range(4)]
        terms += [ssl.info_nce(z2[i], z1, i, 0.5)[0] for i in range(4)]
        assert abs(ssl.batch_info_nce(z1, z2, 0.5)[0] - np.mean(terms)) < 1e-12

    def test_gradients(self):
        rng = np.random.default_rng(4)
        z1, z2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        _, g1, g2 = ssl.batch_info_nce(z1, z2, 0.3)
        assert gc.check(g1, gc.finite_diff(lambda x: ssl.batch_info_nce(x, z2, 0.3)[0], z1)).passed
        assert gc.check(g2, gc.finite_diff(lambda x: ssl.batch_info_nce(z1, x, 0.3)[0], z2)).passed


class TestAugmentation:
    image = np.random.default_rng(0).normal(size=(1, 16, 16))

    def test_deterministic(self):
        a = ssl.two_view_augment(self.image, 5)
        b = ssl.two_view_augment(self.image, 5)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    def test_views_differ(self):
        v1, v2 = ssl.two_view_augment(self.image, 5)
        assert not np.array_equal(v1, v2)

    def test_shape(self):
        img = np.random.default_rng(1).normal(size=(2, 8, 12))
        assert all(v.shape == img.shape for v in ssl.two_view_augment(img, 0))

    def test_identity(self):
        v1, v2 = ssl.two_view_augment(self.image, 9, scale=(1.0, 1.0), flip_p=0.0, noise=0.0)
        np.testing.assert_array_equal(v1, self.image)
        np.testing.assert_array_equal(v2, self.image)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssl.two_view_augment(np.zeros((1, 3, 8)), 0)
