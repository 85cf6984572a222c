"""Network building blocks: oracles for CE, layer norm, attention, masking."""
import math

import numpy as np
import pytest

from toksep import nn
from toksep.tensor import Tensor

# 1/sqrt(1 + 1e-5): layer_norm of [1, -1] with the eps inside the sqrt.
LN_UNIT_PAIR = 0.9999950000374997


def leaf(data):
    return Tensor(np.asarray(data, dtype=float), requires_grad=True)


def identity_attn_params(d):
    eye = np.eye(d)
    zero = np.zeros(d)
    return {
        "wq": Tensor(eye), "bq": Tensor(zero),
        "wk": Tensor(eye),
        "wv": Tensor(eye), "bv": Tensor(zero),
        "wo": Tensor(eye), "bo": Tensor(zero),
    }


def random_attn_params(d, rng):
    def w():
        return Tensor(rng.uniform(-1, 1, (d, d)) / math.sqrt(d))
    return {
        "wq": w(), "bq": Tensor(rng.uniform(-0.1, 0.1, d)),
        "wk": w(),
        "wv": w(), "bv": Tensor(rng.uniform(-0.1, 0.1, d)),
        "wo": w(), "bo": Tensor(rng.uniform(-0.1, 0.1, d)),
    }


class TestLinearGelu:
    def test_linear_matches_numpy(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
        out = nn.linear(leaf(x), leaf(w), leaf(b))
        np.testing.assert_allclose(out.data, x @ w + b, atol=1e-12)

    def test_linear_without_bias(self):
        x, w = np.ones((2, 3)), np.ones((3, 5))
        np.testing.assert_allclose(nn.linear(leaf(x), leaf(w)).data, x @ w)

    def test_gelu_fixed_points(self):
        out = nn.gelu(leaf([0.0, 10.0, -10.0])).data
        assert out[0] == 0.0
        np.testing.assert_allclose(out[1], 10.0, atol=1e-6)
        np.testing.assert_allclose(out[2], 0.0, atol=1e-6)

    def test_gelu_gradient(self):
        x = leaf([0.5, -1.2, 2.0])
        loss = nn.gelu(x).sum()
        loss.backward()
        h = 1e-6
        for i in range(3):
            xp, xm = x.data.copy(), x.data.copy()
            xp[i] += h
            xm[i] -= h
            numeric = (nn.gelu(Tensor(xp)).sum().item()
                       - nn.gelu(Tensor(xm)).sum().item()) / (2 * h)
            assert abs(x.grad[i] - numeric) < 1e-6


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = leaf(np.full((2, 4), 3.7))
        out = nn.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_unit_pair_oracle(self):
        out = nn.layer_norm(leaf([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[LN_UNIT_PAIR, -LN_UNIT_PAIR]], atol=1e-12)

    def test_normalizes_then_affines(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 8)) * 4 + 2
        g, b = rng.standard_normal(8), rng.standard_normal(8)
        out = nn.layer_norm(leaf(x), Tensor(g), Tensor(b)).data
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + nn.LAYER_NORM_EPS) * g + b
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = leaf(rng.standard_normal((2, 3)))
        g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
        w = rng.standard_normal((2, 3))
        (nn.layer_norm(x, g, b) * Tensor(w)).sum().backward()
        h = 1e-6
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = (nn.layer_norm(Tensor(x.data), g, b) * Tensor(w)).sum().item()
            flat[i] = orig - h
            fm = (nn.layer_norm(Tensor(x.data), g, b) * Tensor(w)).sum().item()
            flat[i] = orig
            assert abs(x.grad.reshape(-1)[i] - (fp - fm) / (2 * h)) < 1e-5


class TestCrossEntropy:
    def test_uniform_logits_equal_ln_k(self):
        for k in (5, 1000):
            logits = leaf(np.zeros((7, k)))
            ce = nn.cross_entropy(logits, np.zeros(7, dtype=int)).item()
            assert abs(ce - math.log(k)) < 1e-6

    def test_confident_correct_is_tiny(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1e4
        assert nn.cross_entropy(leaf(logits), np.array([2])).item() < 1e-6

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        logits = leaf(rng.standard_normal((10, 6)) * 3)
        targets = rng.integers(0, 6, 10)
        assert nn.cross_entropy(logits, targets).item() >= 0.0

    def test_mask_equals_subset_loss(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((5, 3))
        targets = rng.integers(0, 3, 5)
        # poison frame 2, then mask it out
        poisoned = logits.copy()
        poisoned[2] = [100.0, -100.0, 0.0]
        mask = np.array([True, True, False, True, True])
        masked = nn.cross_entropy(leaf(poisoned), targets, mask=mask).item()
        subset = nn.cross_entropy(leaf(logits[mask]), targets[mask]).item()
        np.testing.assert_allclose(masked, subset, atol=1e-12)

    def test_all_masked_raises(self):
        with pytest.raises(ValueError, match="all positions are masked"):
            nn.cross_entropy(leaf(np.zeros((2, 3))), np.array([0, 1]),
                             mask=np.array([False, False]))

    def test_masked_frames_get_zero_gradient(self):
        logits = leaf(np.random.default_rng(5).standard_normal((4, 3)))
        mask = np.array([True, False, True, False])
        nn.cross_entropy(logits, np.array([0, 1, 2, 0]), mask=mask).backward()
        np.testing.assert_array_equal(logits.grad[~mask], 0.0)
        assert np.abs(logits.grad[mask]).sum() > 0


class TestSinusoidalPositions:
    def test_shape_and_range(self):
        pe = nn.sinusoidal_positions(50, 16)
        assert pe.shape == (50, 16)
        assert np.abs(pe).max() <= 1.0

    def test_position_zero_alternates(self):
        pe = nn.sinusoidal_positions(3, 8)
        np.testing.assert_allclose(pe[0, 0::2], 0.0, atol=1e-12)  # sin(0)
        np.testing.assert_allclose(pe[0, 1::2], 1.0, atol=1e-12)  # cos(0)

    def test_distinct_rows(self):
        pe = nn.sinusoidal_positions(200, 32)
        assert np.unique(pe, axis=0).shape[0] == 200


class TestAttention:
    def test_hand_case_one_head(self):
        # d=2, identity projections: weights softmax([1/sqrt(2), 0]) applied to v
        params = identity_attn_params(2)
        q = leaf([[1.0, 0.0]])
        kv = leaf([[1.0, 0.0], [0.0, 1.0]])
        out, weights, ctx, vh = nn.multi_head_attention(
            q, kv, kv, 1, params, return_internals=True)
        s = math.exp(1 / math.sqrt(2))
        w1 = s / (s + 1.0)
        np.testing.assert_allclose(weights, [[[w1, 1 - w1]]], atol=1e-12)
        np.testing.assert_allclose(out.data, [[w1, 1 - w1]], atol=1e-12)
        np.testing.assert_allclose(ctx, [[[w1, 1 - w1]]], atol=1e-12)

    def test_single_key_returns_projected_value(self):
        rng = np.random.default_rng(6)
        params = random_attn_params(4, rng)
        q = leaf(rng.standard_normal((3, 4)))
        kv = leaf(rng.standard_normal((1, 4)))
        out = nn.multi_head_attention(q, kv, kv, 2, params)
        v = kv.data @ params["wv"].data + params["bv"].data
        expected = v @ params["wo"].data + params["bo"].data
        np.testing.assert_allclose(out.data, np.repeat(expected, 3, axis=0), atol=1e-10)

    def test_key_permutation_invariance(self):
        rng = np.random.default_rng(7)
        params = random_attn_params(8, rng)
        q = leaf(rng.standard_normal((5, 8)))
        kv = rng.standard_normal((6, 8))
        perm = rng.permutation(6)
        a = nn.multi_head_attention(q, leaf(kv), leaf(kv), 4, params)
        b = nn.multi_head_attention(q, leaf(kv[perm]), leaf(kv[perm]), 4, params)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_outputs_are_convex_combinations(self):
        rng = np.random.default_rng(8)
        params = random_attn_params(6, rng)
        q = leaf(rng.standard_normal((4, 6)))
        kv = leaf(rng.standard_normal((5, 6)))
        _, weights, ctx, vh = nn.multi_head_attention(
            q, kv, kv, 3, params, return_internals=True)
        assert (weights >= 0).all()
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(ctx, weights @ vh, atol=1e-10)
        # coordinatewise hull bounds per head
        lo = vh.min(axis=1, keepdims=True) - 1e-9
        hi = vh.max(axis=1, keepdims=True) + 1e-9
        assert (ctx >= lo).all() and (ctx <= hi).all()

    def test_masked_keys_get_exactly_zero_weight(self):
        rng = np.random.default_rng(9)
        params = random_attn_params(4, rng)
        q = leaf(rng.standard_normal((2, 4)))
        kv = leaf(rng.standard_normal((3, 4)))
        mask = np.array([True, False, True])
        _, weights, _, _ = nn.multi_head_attention(
            q, kv, kv, 2, params, key_mask=mask, return_internals=True)
        assert (weights[:, :, 1] == 0.0).all()
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_mask_equals_physically_removing_keys(self):
        rng = np.random.default_rng(10)
        params = random_attn_params(4, rng)
        q = leaf(rng.standard_normal((2, 4)))
        kv = rng.standard_normal((5, 4))
        mask = np.array([True, False, True, True, False])
        masked = nn.multi_head_attention(q, leaf(kv), leaf(kv), 2, params, key_mask=mask)
        removed = nn.multi_head_attention(q, leaf(kv[mask]), leaf(kv[mask]), 2, params)
        np.testing.assert_allclose(masked.data, removed.data, atol=1e-12)

    def test_empty_reference_raises(self):
        params = identity_attn_params(2)
        q = leaf([[1.0, 0.0]])
        empty = Tensor(np.zeros((0, 2)))
        with pytest.raises(ValueError, match="at least one key"):
            nn.multi_head_attention(q, empty, empty, 1, params)

    def test_all_masked_raises(self):
        params = identity_attn_params(2)
        q = leaf([[1.0, 0.0]])
        kv = leaf([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError, match="all keys masked"):
            nn.multi_head_attention(q, kv, kv, 1, params,
                                    key_mask=np.array([False, False]))

    def test_dim_not_divisible_by_heads_raises(self):
        params = identity_attn_params(3)
        x = leaf(np.ones((2, 3)))
        with pytest.raises(ValueError, match="divisible"):
            nn.multi_head_attention(x, x, x, 2, params)
