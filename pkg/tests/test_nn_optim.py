"""Attention kernel contract, module plumbing, Adam, and the cosine schedule."""

import math

import numpy as np
import pytest

from choir import autodiff as ad
from choir.errors import NumericFailure, ShapeMismatch
from choir.nn import CrossAttention, Dropout, Linear, scaled_dot_attention, sinusoidal_position_table
from choir.optim import Adam, cosine_lr


def identity_attention(dim, heads=1):
    rng = np.random.default_rng(0)
    attn = CrossAttention(dim, heads, rng, out_bias=False)
    eye = np.eye(dim)
    attn.w_q.weight.data = eye.copy()
    attn.w_k.weight.data = eye.copy()
    attn.w_v.weight.data = eye.copy()
    attn.w_out.weight.data = eye.copy()
    return attn


class TestAttention:
    def test_width_not_divisible_rejected(self):
        with pytest.raises(ShapeMismatch):
            CrossAttention(6, 4, np.random.default_rng(0))

    def test_single_key_passthrough(self, rng):
        """With one key row, softmax is degenerate and every query returns the
        (projected) single value row."""
        attn = CrossAttention(8, 2, rng)
        q = ad.Tensor(rng.normal(0, 1, (5, 8)))
        kv = ad.Tensor(rng.normal(0, 1, (1, 8)))
        out = attn(q, kv)
        v_row = kv.data @ attn.w_v.weight.data
        expected = (v_row @ attn.w_out.weight.data) + attn.w_out.bias.data
        assert np.abs(out.data - expected).max() < 1e-12

    def test_identical_keys_average_values(self, rng):
        """Two identical keys split the softmax evenly, so the pre-projection
        context equals the mean of the two value rows."""
        q = ad.Tensor(rng.normal(0, 1, (3, 4)))
        k = ad.Tensor(np.tile(rng.normal(0, 1, (1, 4)), (2, 1)))
        v = ad.Tensor(rng.normal(0, 1, (2, 4)))
        ctx, weights = scaled_dot_attention(q, k, v, 1)
        assert np.abs(weights.data - 0.5).max() < 1e-15
        assert np.abs(ctx.data - v.data.mean(axis=0)).max() < 1e-15

    def test_two_key_numeric_weights(self):
        """Raw dot gap of sqrt(d) scales to a logit gap of 1, giving weights
        e/(e+1) and 1/(e+1); hand-computed."""
        d = 4
        attn = identity_attention(d)
        q = ad.Tensor(np.array([[2.0, 0.0, 0.0, 0.0]]))
        kv = ad.Tensor(np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]))
        attn(q, kv)
        w = attn.last_weights.data[0, 0]
        e = math.exp(1.0)
        assert w[0] == pytest.approx(e / (e + 1.0), abs=1e-12)
        assert w[1] == pytest.approx(1.0 / (e + 1.0), abs=1e-12)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_weight_rows_sum_to_one(self, rng):
        attn = CrossAttention(8, 4, rng)
        attn(ad.Tensor(rng.normal(0, 2, (6, 8))), ad.Tensor(rng.normal(0, 2, (9, 8))))
        sums = attn.last_weights.data.sum(axis=-1)
        assert np.abs(sums - 1.0).max() <= 1e-12


class TestModules:
    def test_named_parameters_are_stable(self, rng):
        lin = Linear(3, 4, rng)
        names = list(lin.named_parameters())
        assert names == ["weight", "bias"]

    def test_dropout_disabled_is_identity(self, rng):
        drop = Dropout(0.5, rng)
        x = ad.Tensor(rng.normal(0, 1, (4, 4)))
        assert drop(x) is x

    def test_dropout_seeded_mask(self):
        x = ad.Tensor(np.ones((100, 10)))
        outs = []
        for _ in range(2):
            drop = Dropout(0.25, np.random.default_rng(7))
            drop.training = True
            outs.append(drop(x).data)
        assert np.array_equal(outs[0], outs[1])
        kept = outs[0] != 0.0
        assert 0.6 < kept.mean() < 0.9
        assert np.allclose(outs[0][kept], 1.0 / 0.75)

    def test_position_table_frame_rows_distinct(self):
        table = sinusoidal_position_table(8, 16)
        assert table.shape == (8, 16)
        assert not np.array_equal(table[0], table[1])


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = ad.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad = np.array([0.5, -0.25, 1e-3])
        opt = Adam({"p": p}, lr=1e-2)
        before = p.data.copy()
        opt.step()
        update = p.data - before
        assert np.allclose(update, -1e-2 * np.sign(p.grad), rtol=1e-4)

    def test_zero_grad_keeps_parameters(self):
        p = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        opt = Adam({"p": p}, lr=1e-2)
        before = p.data.copy()
        opt.step()
        assert np.array_equal(p.data, before)
        assert opt.t == 1

    def test_nonfinite_grad_rejected(self):
        p = ad.Tensor(np.ones(2), requires_grad=True)
        p.grad = np.array([np.nan, 0.0])
        opt = Adam({"p": p})
        with pytest.raises(NumericFailure):
            opt.step()


class TestCosineSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 1e-4) == pytest.approx(1e-4)
        assert cosine_lr(100, 100, 1e-4) == pytest.approx(0.0, abs=1e-20)
        # last training epoch sits near zero but stays positive
        last = cosine_lr(99, 100, 1e-4)
        assert 0.0 < last < 2e-6

    def test_monotone_decay(self):
        values = [cosine_lr(e, 50, 1.0) for e in range(51)]
        assert all(a >= b for a, b in zip(values, values[1:]))
