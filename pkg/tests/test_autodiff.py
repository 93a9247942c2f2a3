"""Engine tests: every primitive against central finite differences, the
row invariants of softmax/layer norm, backward determinism, and the
feature-scaling gradient identity on a bias-free linear layer."""

import numpy as np
import pytest

from choir import autodiff as ad
from choir.errors import NumericFailure, ShapeMismatch


def fd_max_err(f, x0, h=1e-5):
    x = ad.Tensor(np.asarray(x0, dtype=np.float64))
    return ad.finite_difference_check(f, x, h=h)


class TestForwardOps:
    def test_softmax_symmetry(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_softmax_rows_sum_to_one(self, rng):
        x = ad.Tensor(rng.normal(0, 3, (20, 7)))
        rows = ad.softmax(x).data.sum(axis=1)
        assert np.abs(rows - 1.0).max() <= 1e-12

    def test_layer_norm_rows(self, rng):
        x = ad.Tensor(rng.normal(2.0, 5.0, (16, 33)))
        y = ad.layer_norm(x).data
        assert np.abs(y.mean(axis=1)).max() <= 1e-10
        assert np.abs(y.var(axis=1) - 1.0).max() <= 1e-6

    def test_concat_rows(self, rng):
        token = ad.Tensor(rng.normal(0, 1, (1, 5)))
        rest = ad.Tensor(rng.normal(0, 1, (9, 5)))
        out = ad.concat([token, rest], axis=0)
        assert out.data.shape == (10, 5)
        assert np.array_equal(out.data[0], token.data[0])

    def test_mul_square_gradient(self):
        x = ad.Tensor(3.0, requires_grad=True)
        with ad.Graph():
            y = ad.mul(x, x)
            ad.backward(y)
        assert x.grad == pytest.approx(6.0, abs=1e-15)

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeMismatch) as err:
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))
        msg = str(err.value)
        assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg

    def test_forward_nan_rejected(self):
        with pytest.raises(NumericFailure):
            ad.log(ad.Tensor([-1.0]))

    def test_sigmoid_extremes_stay_finite(self):
        out = ad.sigmoid(ad.Tensor([-800.0, 0.0, 800.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[1] == pytest.approx(0.5)


class TestBackward:
    def test_linear_map_gradient(self):
        w = ad.Tensor(np.array([[0.5], [2.0]]), requires_grad=True)
        x = ad.Tensor(np.array([[1.0, 2.0]]))
        with ad.Graph():
            loss = ad.tensor_sum(ad.matmul(x, w))
            ad.backward(loss)
        assert np.allclose(w.grad, [[1.0], [2.0]], atol=1e-15)

    def test_softmax_cross_entropy_uniform(self):
        logits = ad.Tensor(np.zeros(2), requires_grad=True)
        with ad.Graph():
            row = ad.reshape(logits, (1, 2))
            lse = ad.log(ad.tensor_sum(ad.exp(row)))
            loss = ad.sub(lse, ad.reshape(ad.narrow(row, 1, 0, 1), ()))
            ad.backward(loss)
        assert np.allclose(logits.grad, [-0.5, 0.5], atol=1e-12)

    def test_non_scalar_loss_rejected(self, rng):
        x = ad.Tensor(rng.normal(0, 1, (3,)), requires_grad=True)
        with ad.Graph():
            y = ad.mul(x, 2.0)
            with pytest.raises(ShapeMismatch):
                ad.backward(y)

    def test_three_layer_mlp_matches_finite_differences(self, rng):
        w1 = ad.Tensor(rng.normal(0, 0.4, (6, 8)), requires_grad=True)
        w2 = ad.Tensor(rng.normal(0, 0.4, (8, 8)), requires_grad=True)
        w3 = ad.Tensor(rng.normal(0, 0.4, (8, 1)), requires_grad=True)

        def f(x):
            h = ad.gelu(ad.affine(x, w1))
            h = ad.gelu(ad.affine(h, w2))
            return ad.tensor_sum(ad.affine(h, w3))

        assert fd_max_err(f, rng.normal(0, 1, (4, 6))) < 1e-4

    def test_backward_deterministic_bitwise(self, rng):
        w = ad.Tensor(rng.normal(0, 0.5, (5, 5)), requires_grad=True)
        x = ad.Tensor(rng.normal(0, 1, (3, 5)))

        def run():
            w.grad = None
            with ad.Graph():
                h = ad.softmax(ad.matmul(x, w))
                loss = ad.tensor_sum(ad.mul(h, h))
                ad.backward(loss)
            return w.grad.tobytes()

        assert run() == run()


PRIMITIVE_CASES = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "div": lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)),
}


class TestPrimitiveGradients:
    """Every primitive against central differences on many seeds."""

    @pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
    @pytest.mark.parametrize("seed", range(5))
    def test_binary_ops(self, name, seed):
        rng = np.random.default_rng(seed)
        op = PRIMITIVE_CASES[name]
        b = ad.Tensor(rng.normal(0, 1, (4, 3)), requires_grad=True)

        def f(x):
            return ad.tensor_sum(ad.mul(op(x, b), op(x, b)))

        assert fd_max_err(f, rng.normal(0, 1, (4, 3))) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_unary_chain(self, seed):
        """log/sqrt/sigmoid/gelu/softmax/layer_norm composite, 20 seeds."""
        rng = np.random.default_rng(100 + seed)

        def f(x):
            a = ad.sigmoid(x)
            b = ad.gelu(x)
            c = ad.softmax(x, axis=-1)
            d = ad.layer_norm(x)
            e = ad.log(ad.add(ad.mul(a, a), 0.5))
            g = ad.sqrt(ad.add(ad.mul(b, b), 1.0))
            out = ad.add(ad.add(e, g), ad.add(c, d))
            return ad.tensor_mean(ad.mul(out, out))

        assert fd_max_err(f, rng.normal(0, 1.5, (3, 6))) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_reductions_and_shapes(self, seed):
        rng = np.random.default_rng(200 + seed)

        def f(x):
            a = ad.tensor_sum(x, axis=0)
            b = ad.tensor_mean(x, axis=1, keepdims=True)
            c = ad.amax(x, axis=1)
            d = ad.transpose(ad.reshape(x, (2, 6)), (1, 0))
            parts = ad.concat([ad.narrow(x, 0, 0, 2), ad.narrow(x, 0, 2, 2)], axis=0)
            mixed = ad.add(ad.tensor_sum(d), ad.tensor_sum(parts))
            return ad.add(ad.add(ad.tensor_sum(ad.mul(a, a)), ad.tensor_sum(ad.mul(b, c))), mixed)

        assert fd_max_err(f, rng.normal(0, 1, (4, 3))) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_attention_shaped_graph(self, seed):
        rng = np.random.default_rng(300 + seed)
        k = ad.Tensor(rng.normal(0, 0.5, (5, 4)), requires_grad=True)
        v = ad.Tensor(rng.normal(0, 0.5, (5, 4)), requires_grad=True)

        def f(q):
            qh = ad.split_heads(q, 2)
            kh = ad.split_heads(k, 2)
            vh = ad.split_heads(v, 2)
            att = ad.softmax(ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 0.7))
            out = ad.merge_heads(ad.matmul(att, vh))
            return ad.tensor_sum(ad.mul(out, out))

        assert fd_max_err(f, rng.normal(0, 1, (3, 4))) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_fused_affine_layernorm(self, seed):
        rng = np.random.default_rng(400 + seed)
        w = ad.Tensor(rng.normal(0, 0.5, (6, 6)), requires_grad=True)
        b = ad.Tensor(rng.normal(0, 0.5, (6,)), requires_grad=True)
        gamma = ad.Tensor(rng.normal(1, 0.2, (6,)), requires_grad=True)
        beta = ad.Tensor(rng.normal(0, 0.2, (6,)), requires_grad=True)

        def f(x):
            h = ad.layer_norm_affine(ad.affine(x, w, b), gamma, beta)
            c = ad.clip(ad.sigmoid(h), 0.2, 0.8)
            return ad.tensor_sum(ad.mul(ad.absolute(c), ad.broadcast_to(gamma, c.data.shape)))

        assert fd_max_err(f, rng.normal(0, 1, (4, 6))) < 1e-4


class TestFiniteDifferenceCheck:
    def test_exact_quadratic(self):
        err = fd_max_err(lambda x: ad.tensor_sum(ad.mul(x, x)), np.array([1.0, -2.0]), h=1e-5)
        assert err < 1e-8

    def test_nondeterministic_function_rejected(self, rng):
        state = {"n": 0}

        def f(x):
            state["n"] += 1
            return ad.tensor_sum(ad.mul(x, float(state["n"])))

        with pytest.raises(NumericFailure):
            fd_max_err(f, rng.normal(0, 1, (3,)))

    def test_nonfinite_function_rejected(self):
        def f(x):
            with ad.finite_checks(False):
                return ad.log(x)

        with pytest.raises(NumericFailure):
            fd_max_err(f, np.array(-2.0))


class TestModulationIdentity:
    """Gradient of a bias-free layer fed a token-scaled input equals the
    outer product of the downstream delta with that scaled input."""

    @pytest.mark.parametrize("seed", range(8))
    def test_outer_product_identity(self, seed):
        rng = np.random.default_rng(seed)
        tau = rng.normal(1.0, 0.3, 6)
        o = rng.normal(0, 1, (5, 6))
        w = ad.Tensor(rng.normal(0, 0.5, (6, 4)), requires_grad=True)
        with ad.Graph():
            scaled = ad.mul(ad.Tensor(tau), ad.Tensor(o))
            z = ad.matmul(scaled, w)
            loss = ad.tensor_sum(ad.mul(ad.sigmoid(z), z))
            grads = ad.backward(loss)
        delta = grads[z._node]
        analytic = np.einsum("lm,ln->mn", tau * o, delta)
        assert np.abs(w.grad - analytic).max() < 1e-10

    def test_doubling_tau_doubles_gradient_exactly(self):
        rng = np.random.default_rng(11)
        tau = rng.normal(1.0, 0.3, 6)
        o = rng.normal(0, 1, (5, 6))
        delta = rng.normal(0, 1, (5, 4))
        g1 = np.einsum("lm,ln->mn", tau * o, delta)
        g2 = np.einsum("lm,ln->mn", (2.0 * tau) * o, delta)
        assert np.array_equal(g2, 2.0 * g1)

    def test_zero_tau_zeroes_gradient_exactly(self):
        rng = np.random.default_rng(12)
        o = rng.normal(0, 1, (5, 6))
        w = ad.Tensor(rng.normal(0, 0.5, (6, 4)), requires_grad=True)
        with ad.Graph():
            z = ad.matmul(ad.mul(ad.Tensor(np.zeros(6)), ad.Tensor(o)), w)
            ad.backward(ad.tensor_sum(ad.mul(z, ad.sigmoid(z))))
        assert np.all(w.grad == 0.0)
