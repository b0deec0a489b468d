import math

import numpy as np
import pytest

from audiocap.layers import (
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    LoraAdapter,
    MultiHeadAttention,
    TransformerStack,
    causal_mask,
    prefix_lm_mask,
)
from audiocap.numerics import (
    Rng,
    Tensor,
    cross_entropy_from_logits,
    finite_difference_check,
    gelu,
    layer_norm,
    scaled_dot_attention,
    softmax,
)


class TestSoftmax:
    def test_uniform(self):
        out = softmax(np.zeros(4))
        assert np.allclose(out, 0.25)

    def test_overflow_stability(self):
        out = softmax(np.array([1000.0, 0.0]))
        assert abs(out[0] - 1.0) < 1e-12
        assert abs(out[1]) < 1e-12
        assert np.all(np.isfinite(out))

    def test_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()  # independent direct computation
        assert np.allclose(softmax(x), expected, atol=1e-12)
        assert np.allclose(softmax(x), [0.0900, 0.2447, 0.6652], atol=5e-5)

    def test_rows_sum_to_one(self):
        x = Rng(0).normal(3.0, (5, 7))
        out = softmax(x, axis=-1)
        assert np.all(out > 0) and np.all(out <= 1)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-9)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="softmax"):
            softmax(np.array([1.0, np.nan]))
        with pytest.raises(ValueError, match="softmax"):
            softmax(np.array([np.inf, 0.0]))


class TestLayerNorm:
    def test_constant_row(self):
        out = layer_norm(np.array([1.0, 1.0, 1.0]), 1.0, 0.0, eps=1e-5)
        assert np.allclose(out, 0.0, atol=1e-6)

    def test_two_point_symmetry(self):
        out = layer_norm(np.array([1.0, 3.0]), 1.0, 0.0)
        assert np.allclose(out, [-1.0, 1.0], atol=1e-4)

    def test_normalizes_random_row(self):
        x = Rng(3).normal(2.0, (6, 9))
        out = layer_norm(x, 1.0, 0.0, eps=1e-12)
        assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        assert np.allclose(out.var(axis=-1), 1.0, atol=1e-6)

    def test_short_row_rejected(self):
        with pytest.raises(ValueError):
            layer_norm(np.array([1.0]), 1.0, 0.0)


class TestScaledDotAttention:
    def test_one_hot_keys_select_matching_value(self):
        # queries equal to scaled one-hot keys dominate the matching slot
        k = np.eye(3) * 50.0
        q = k.copy()
        v = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        out = scaled_dot_attention(q, k, v)
        assert np.allclose(out, v, atol=1e-6)

    def test_causal_first_row_ignores_later_values(self):
        rng = Rng(1)
        q = rng.normal(1.0, (3, 4))
        k = rng.normal(1.0, (3, 4))
        v1 = rng.normal(1.0, (3, 4))
        v2 = v1.copy()
        v2[1:] = 99.0
        out1 = scaled_dot_attention(q, k, v1, causal_mask=True)
        out2 = scaled_dot_attention(q, k, v2, causal_mask=True)
        assert np.array_equal(out1[0], out2[0])

    def test_two_by_two_hand_case(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        k = np.array([[1.0, 1.0], [0.0, 2.0]])
        v = np.array([[1.0, 0.0], [0.0, 1.0]])
        # row 0 scores: [1, 0] / sqrt(2); row 1: [1, 2] / sqrt(2)
        s = math.sqrt(2.0)
        w0 = np.exp([1 / s, 0.0]); w0 /= w0.sum()
        w1 = np.exp([1 / s, 2 / s]); w1 /= w1.sum()
        expected = np.stack([w0 @ v, w1 @ v])
        assert np.allclose(scaled_dot_attention(q, k, v), expected, atol=1e-12)

    def test_convex_combination(self):
        rng = Rng(7)
        out = scaled_dot_attention(
            rng.normal(1.0, (4, 5)), rng.normal(1.0, (4, 5)), rng.normal(1.0, (4, 3))
        )
        assert out.shape == (4, 3)
        assert np.all(np.isfinite(out))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            scaled_dot_attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)))


class TestFiniteDifference:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

        def f(t):
            val = float(np.sum(t.data**2))
            t.accumulate_grad(2.0 * t.data)
            return val

        assert finite_difference_check(f, x) < 1e-8
        # the analytic gradient really is [2, 4]
        x.zero_grad()
        f(x)
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_one_layer_cross_entropy(self):
        rng = Rng(5)
        lin = Linear(4, 3, rng)
        x = rng.normal(1.0, (6, 4))
        y = np.array([0, 2, 1, 1, 0, 2])

        def f(t):
            ctx = {}
            logits = lin.forward(x, ctx)
            loss, dlogits = cross_entropy_from_logits(logits, y)
            lin.backward(dlogits, ctx)
            return loss

        assert finite_difference_check(f, lin.w) < 1e-4
        assert finite_difference_check(f, lin.b) < 1e-4


def _grad_check_layer(params, f, bound=1e-6):
    worst = 0.0
    for _, p in params:
        worst = max(worst, finite_difference_check(f, p))
    assert worst < bound, f"worst relative error {worst}"


class TestLayerGradients:
    def test_linear(self):
        lin = Linear(3, 5, Rng(1))
        x = Rng(2).normal(1.0, (4, 3))

        def f(t):
            ctx = {}
            y = lin.forward(x, ctx)
            lin.backward(np.cos(y), ctx)
            return float(np.sum(np.sin(y)))

        _grad_check_layer(lin.params(), f)

    def test_embedding(self):
        emb = Embedding(7, 4, Rng(3))
        ids = np.array([0, 3, 3, 6, 1])

        def f(t):
            ctx = {}
            y = emb.forward(ids, ctx)
            emb.backward(np.cos(y), ctx)
            return float(np.sum(np.sin(y)))

        _grad_check_layer(emb.params(), f)

    def test_layer_norm(self):
        ln = LayerNorm(6)
        ln.gain.data[:] = Rng(4).normal(1.0, (6,))
        x = Rng(5).normal(1.0, (3, 6))

        def f(t):
            ctx = {}
            y = ln.forward(x, ctx)
            ln.backward(np.cos(y), ctx)
            return float(np.sum(np.sin(y)))

        _grad_check_layer(ln.params(), f)

    def test_gelu_through_feedforward(self):
        ffn = FeedForward(4, 8, Rng(6))
        x = Rng(7).normal(1.0, (5, 4))

        def f(t):
            ctx = {}
            y = ffn.forward(x, ctx)
            ffn.backward(2.0 * y, ctx)
            return float(np.sum(y**2))

        _grad_check_layer(ffn.params(), f)

    def test_attention_with_lora_and_mask(self):
        mha = MultiHeadAttention(8, 2, Rng(8), lora_rank=3, lora_alpha=6.0)
        mha.lora_q.b.data[:] = Rng(9).normal(0.05, mha.lora_q.b.shape)
        mha.lora_v.b.data[:] = Rng(10).normal(0.05, mha.lora_v.b.shape)
        x = Rng(11).normal(1.0, (6, 8))
        mask = prefix_lm_mask(6, 2)

        def f(t):
            ctx = {}
            y = mha.forward(x, mask, ctx)
            mha.backward(2.0 * y, ctx)
            return float(np.sum(y**2))

        _grad_check_layer(mha.params(), f)

    def test_softmax_cross_entropy_closed_form(self):
        logits = Tensor(Rng(12).normal(1.0, (5, 7)), requires_grad=True)
        y = np.array([1, 0, 6, 3, 3])

        def f(t):
            loss, dlogits = cross_entropy_from_logits(t.data, y)
            t.accumulate_grad(dlogits)
            return loss

        assert finite_difference_check(f, logits) < 1e-8

    def test_lora_branch(self):
        adapter = LoraAdapter(6, 6, rank=2, alpha=4.0, rng=Rng(13))
        adapter.b.data[:] = Rng(14).normal(0.1, adapter.b.shape)
        x = Rng(15).normal(1.0, (4, 6))

        def f(t):
            ctx = {}
            y = adapter.forward(x, ctx)
            adapter.backward(2.0 * y, ctx)
            return float(np.sum(y**2))

        _grad_check_layer(adapter.params(), f)


class TestDeterminismAndMasks:
    def test_rng_bit_identical_streams(self):
        a = Rng(42).child("x").normal(1.0, (16,))
        b = Rng(42).child("x").normal(1.0, (16,))
        assert np.array_equal(a, b)
        c = Rng(42).child("y").normal(1.0, (16,))
        assert not np.array_equal(a, c)

    def test_forward_deterministic(self):
        stack = TransformerStack(2, 8, 2, 16, Rng(0))
        x = Rng(1).normal(1.0, (5, 8))
        assert np.array_equal(stack.forward(x, None), stack.forward(x, None))

    def test_causal_invariance_bit_identical(self):
        # decoder logits at position t must not move when later rows change
        stack = TransformerStack(2, 8, 2, 16, Rng(2), lora_rank=2, lora_alpha=4.0)
        rng = Rng(3)
        x = rng.normal(1.0, (6, 8))
        y1 = stack.forward(x, causal_mask(6))
        x2 = x.copy()
        x2[4:] = rng.normal(5.0, (2, 8))
        y2 = stack.forward(x2, causal_mask(6))
        assert np.array_equal(y1[:4], y2[:4])

    def test_prefix_mask_shape(self):
        mask = prefix_lm_mask(5, 2)
        allowed = mask == 0.0
        # prefix rows see only the prefix
        assert allowed[0].tolist() == [True, True, False, False, False]
        assert allowed[1].tolist() == [True, True, False, False, False]
        # suffix rows see prefix plus causal suffix
        assert allowed[2].tolist() == [True, True, True, False, False]
        assert allowed[4].tolist() == [True, True, True, True, True]

    def test_gelu_tanh_constants(self):
        # spot value from the tanh approximation
        x = np.array([0.5])
        inner = math.sqrt(2 / math.pi) * (0.5 + 0.044715 * 0.125)
        expected = 0.5 * 0.5 * (1 + math.tanh(inner))
        assert np.allclose(gelu(x), expected, atol=1e-15)
