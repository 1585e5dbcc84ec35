import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfda import diffcore as dc
from tfda.diffcore import Tensor
from tfda.losses import (
    LossBundle,
    class_balanced_ce,
    combined_contrastive,
    consistency_kl,
    entropy_weights,
    info_nce,
    info_nce_masked,
    label_propagation,
    total_loss,
    tsallis_uncertainty,
)

from conftest import rand_probs


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class TestClassBalancedCE:
    def test_uniform_counts_is_plain_ce(self):
        rng = np.random.default_rng(0)
        p, y = rand_probs(rng, 6, 3), np.array([0, 1, 2, 0, 1, 2])
        want = -np.mean(np.log(p[np.arange(6), y]))
        np.testing.assert_allclose(class_balanced_ce(Tensor(p), y, [2, 2, 2]).data, want, rtol=1e-14)

    def test_hand_weight(self):
        out = class_balanced_ce(Tensor([[0.5, 0.5]]), [1], [3, 1])
        np.testing.assert_allclose(out.data, 2 * np.log(2))

    def test_one_hot_optimum(self):
        out = class_balanced_ce(Tensor(np.eye(3)), [0, 1, 2], [1, 1, 1])
        assert 0 <= float(out.data) <= 3 * np.log(1 / (1 - 1e-12))

    def test_zero_prob_clamped(self):
        out = class_balanced_ce(Tensor([[1.0, 0.0]]), [1], [0, 1])
        np.testing.assert_allclose(out.data, -np.log(1e-12))

    def test_all_zero_counts(self):
        with pytest.raises(ValueError):
            class_balanced_ce(Tensor([[0.5, 0.5]]), [0], [0, 0])


class TestLabelPropagation:
    def test_exact(self):
        assert float(label_propagation(Tensor(np.eye(2)), [0, 1]).data) == 0.0

    def test_hand_example(self):
        np.testing.assert_allclose(label_propagation(Tensor([[0.6, 0.4]]), [0]).data, np.sqrt(0.32) / 2, atol=1e-12)
        np.testing.assert_allclose(label_propagation(Tensor([[0.6, 0.4]]), [0]).data, 0.282843, atol=1e-6)

    def test_empty(self):
        assert float(label_propagation(Tensor(np.zeros((0, 3))), []).data) == 0.0

    def test_mean_over_samples(self):
        p = np.array([[0.6, 0.4], [1.0, 0.0]])
        np.testing.assert_allclose(label_propagation(Tensor(p), [0, 0]).data, np.sqrt(0.32) / 4, atol=1e-12)


class TestInfoNCE:
    def test_no_negatives_zero(self):
        q = unit([1.0, 2.0])
        out = info_nce_masked(Tensor(q), Tensor(q), np.zeros((0, 2)), None, 0.5)
        assert float(out.data) == 0.0

    def test_all_masked_zero(self):
        q = unit([1.0, 0.0])
        keys = np.array([[0.0, 1.0]])
        assert float(info_nce_masked(Tensor(q), Tensor(q), keys, np.array([False]), 1.0).data) == 0.0

    def test_one_negative(self):
        q = np.array([1.0, 0.0])
        out = info_nce_masked(Tensor(q), Tensor(q), np.array([[0.0, 1.0]]), None, 1.0)
        np.testing.assert_allclose(out.data, np.log(1 + np.exp(-1)), atol=1e-12)
        np.testing.assert_allclose(out.data, 0.313262, atol=1e-6)

    def test_two_negatives(self):
        q = np.array([1.0, 0.0, 0.0])
        keys = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        out = info_nce_masked(Tensor(q), Tensor(q), keys, None, 1.0)
        np.testing.assert_allclose(out.data, np.log((np.e + 2) / np.e), atol=1e-12)
        np.testing.assert_allclose(out.data, 0.551445, atol=1e-6)

    def test_scalar_form_agrees(self):
        assert info_nce(1.0, [0.0]) == pytest.approx(0.313262, abs=1e-6)
        assert info_nce(1.0, [0.0, 0.0]) == pytest.approx(0.551445, abs=1e-6)

    def test_mask_drops_terms(self):
        rng = np.random.default_rng(1)
        q, k, keys = unit(rng.normal(size=(3, 4))), unit(rng.normal(size=(3, 4))), unit(rng.normal(size=(5, 4)))
        mask = rng.random((3, 5)) < 0.5
        got = float(info_nce_masked(Tensor(q), Tensor(k), keys, mask, 0.2).data)
        want = np.mean([info_nce(q[i] @ k[i], keys[mask[i]] @ q[i], 0.2) for i in range(3)])
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            info_nce_masked(Tensor(unit([1.0, 0])), Tensor(unit([1.0, 0])), np.zeros((0, 2)), None, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-0.9, 0.9), st.lists(st.floats(-0.9, 0.9), min_size=1, max_size=6), st.floats(0.05, 2.0))
    def test_monotone(self, pos, negs, tau):
        base = info_nce(pos, negs, tau)
        assert info_nce(pos + 0.05, negs, tau) < base
        for j in range(len(negs)):
            bumped = list(negs)
            bumped[j] += 0.05
            assert info_nce(pos, bumped, tau) > base


class TestCombined:
    def test_zero(self):
        assert combined_contrastive(0.0, 0.0, 0.0)[3] == 0.0

    def test_hand(self):
        assert combined_contrastive(0.4, 0.6, 1.0, 0.5, 0.5) == pytest.approx((0.4, 0.6, 1.0, 1.0))

    def test_alpha2_zero(self):
        assert combined_contrastive(0.4, 0.6, 123.0, 0.5, 0.0)[3] == pytest.approx(0.5)


class TestConsistency:
    def test_equal_zero(self):
        p = rand_probs(np.random.default_rng(2), 4, 3)
        assert float(consistency_kl(Tensor(p), Tensor(p)).data) == 0.0

    def test_hand(self):
        out = consistency_kl(Tensor([[0.5, 0.5]]), Tensor([[0.25, 0.75]]))
        a = 0.5 * np.log(0.5 / 0.25) + 0.5 * np.log(0.5 / 0.75)
        b = 0.25 * np.log(0.25 / 0.5) + 0.75 * np.log(0.75 / 0.5)
        np.testing.assert_allclose([a, b], [0.143841, 0.130812], atol=1e-6)
        np.testing.assert_allclose(out.data, a + b, atol=1e-12)
        np.testing.assert_allclose(out.data, 0.274653, atol=1e-5)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetric_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        p, q = rand_probs(rng, 3, 4), rand_probs(rng, 3, 4)
        a = float(consistency_kl(Tensor(p), Tensor(q)).data)
        b = float(consistency_kl(Tensor(q), Tensor(p)).data)
        assert a >= 0
        assert a == pytest.approx(b, rel=1e-12)

    def test_one_hot_finite(self):
        assert np.isfinite(consistency_kl(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).data)


class TestTsallis:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 10))
    def test_single_sample(self, seed, C):
        h = rand_probs(np.random.default_rng(seed), 1, C)
        np.testing.assert_allclose(tsallis_uncertainty(Tensor(h), 2.0).data, -1 / C, atol=1e-9)

    def test_two_one_hot(self):
        np.testing.assert_allclose(entropy_weights(np.eye(2)), [1, 1])
        np.testing.assert_allclose(tsallis_uncertainty(Tensor(np.eye(2)), 2.0).data, -1.0, atol=1e-12)

    def test_mixed(self):
        h = np.array([[1.0, 0.0], [0.5, 0.5]])
        np.testing.assert_allclose(entropy_weights(h), [8 / 7, 6 / 7], atol=1e-12)
        np.testing.assert_allclose(tsallis_uncertainty(Tensor(h), 2.0).data, -2 / 3, atol=1e-12)

    def test_empty_class_guard(self):
        h = np.array([[1.0, 0.0, 0.0], [0.6, 0.4, 0.0]])
        assert np.isfinite(tsallis_uncertainty(Tensor(h), 2.0).data)

    def test_detached_weights(self):
        """Gradient equals that of the objective with eta and beta frozen."""
        rng = np.random.default_rng(3)
        h = Tensor(rand_probs(rng, 4, 3), requires_grad=True)
        tsallis_uncertainty(h, 2.0).backward()
        eta, col = entropy_weights(h.data), h.data.sum(axis=0)
        want = -(1 / 3) * 2 * h.data * eta[:, None] / col[None, :]
        np.testing.assert_allclose(h.grad, want, rtol=1e-12)

    def test_single_sample_has_gradient(self):
        h = Tensor([[0.7, 0.3]], requires_grad=True)
        tsallis_uncertainty(h, 2.0).backward()
        assert np.any(h.grad != 0)

    def test_bad_exponent(self):
        with pytest.raises(ValueError):
            tsallis_uncertainty(Tensor([[1.0]]), 1.0)


class TestTotal:
    def test_zero(self):
        assert total_loss(0, 0, 0, 0, 0, 1.0, 0.5, 0.5, 0.5) == 0

    def test_mu_r_one(self):
        assert total_loss(1.0, 99.0, 0, 0, 0, 1.0, 0.5, 0.5, 0.5) == 1.0

    def test_hand(self):
        assert total_loss(1, 1, 1, 1, 1, 0.5, 0.5, 0.5, 0.5) == pytest.approx(2.5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=5, max_size=5), st.integers(0, 4), st.floats(-5, 5))
    def test_linear(self, comps, which, delta):
        mu = (0.8, 0.4, 0.3, 0.2)
        bumped = list(comps)
        bumped[which] += delta
        coef = [mu[0], 1 - mu[0], mu[1], mu[2], mu[3]][which]
        assert total_loss(*bumped, *mu) - total_loss(*comps, *mu) == pytest.approx(coef * delta, abs=1e-9)

    def test_tensor_inputs(self):
        out = total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), Tensor(4.0), Tensor(5.0), 0.5, 0.1, 0.2, 0.3)
        np.testing.assert_allclose(out.data, 0.5 + 1.0 + 0.3 + 0.8 + 1.5)

    def test_bundle_names(self):
        assert LossBundle.names() == ["ce", "lp", "cl_time", "cl_freq", "cl_tf", "cl", "cons", "ul", "total"]
