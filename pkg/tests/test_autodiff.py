"""Tensor engine: oracles are brute-force references and finite differences."""

import numpy as np
import pytest

from bhmaml import autodiff as ad
from bhmaml import nn
from bhmaml.autodiff import Tensor
from bhmaml.errors import ContractError, DimensionError


def fd_grad(f, t, eps=1e-5):
    """Central finite differences of a scalar-valued f() in each coordinate of t."""
    out = np.zeros(t.data.size)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        lp = f().item()
        flat[i] = saved - eps
        lm = f().item()
        flat[i] = saved
        out[i] = (lp - lm) / (2 * eps)
    return out.reshape(t.shape)


class TestMatmul:
    def test_identity(self):
        b = np.arange(9.0).reshape(3, 3)
        out = ad.matmul(Tensor(np.eye(3)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_scalar_case(self):
        out = ad.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert out.data[0, 0] == 6.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
        ref = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    ref[i, j] += a[i, k] * b[k, j]
        out = ad.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_backward_adjoints(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def f():
            c = ad.matmul(a, b)
            return ad.reduce_sum(ad.mul(c, c))

        ga, gb = ad.backward(f(), [a, b])
        np.testing.assert_allclose(ga.data, fd_grad(f, a), atol=1e-7)
        np.testing.assert_allclose(gb.data, fd_grad(f, b), atol=1e-7)


class TestBackward:
    def test_square_at_three(self):
        x = Tensor(3.0, requires_grad=True)
        (g,) = ad.backward(ad.mul(x, x), [x])
        assert g.data == 6.0

    def test_unreachable_leaf_gets_zero(self):
        x = Tensor(3.0, requires_grad=True)
        c = Tensor(1.0, requires_grad=True)
        (g,) = ad.backward(ad.mul(x, x), [c])
        assert g.data == 0.0

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            ad.backward(ad.mul(x, x), [x])

    def test_cross_entropy_linear_matches_fd(self):
        rng = np.random.default_rng(2)
        w = Tensor(rng.standard_normal((4, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
        x = Tensor(rng.standard_normal((6, 4)))
        y = np.array([0, 1, 2, 0, 1, 2])

        def f():
            return nn.cross_entropy(nn.linear(x, w, b), y)

        gw, gb = ad.backward(f(), [w, b])
        for g, t in ((gw, w), (gb, b)):
            num = fd_grad(f, t)
            rel = np.abs(g.data - num) / np.maximum(1.0, np.maximum(np.abs(g.data), np.abs(num)))
            assert rel.max() < 1e-6

    def test_adjoint_linearity(self):
        """backward of a sum of losses equals the sum of separate backwards."""
        rng = np.random.default_rng(3)
        w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        x1, x2 = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 3)))

        def loss(x):
            return ad.reduce_sum(ad.tanh(ad.matmul(x, w)))

        (g1,) = ad.backward(loss(x1), [w])
        (g2,) = ad.backward(loss(x2), [w])
        (g12,) = ad.backward(ad.add(loss(x1), loss(x2)), [w])
        np.testing.assert_allclose(g12.data, g1.data + g2.data, atol=1e-12)

    def test_bitwise_determinism(self):
        def run():
            rng = np.random.default_rng(4)
            w = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
            x = Tensor(rng.standard_normal((3, 5)))
            loss = ad.reduce_sum(ad.exp(ad.mul(ad.matmul(x, w), Tensor(0.1))))
            (g,) = ad.backward(loss, [w])
            return loss.data.copy(), g.data.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert (l1 == l2).all() and (g1 == g2).all()

    def test_second_order_through_create_graph(self):
        # d2/dx2 of x^3 at x = 2 is 12
        x = Tensor(2.0, requires_grad=True)
        loss = ad.mul(ad.mul(x, x), x)
        (g,) = ad.backward(loss, [x], create_graph=True)
        (h,) = ad.backward(g, [x])
        assert abs(h.data - 12.0) < 1e-12


class TestJvp:
    def test_linear_map(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((4, 4))
        x, v = rng.standard_normal(4), rng.standard_normal(4)
        out = ad.jvp(lambda t: ad.reshape(ad.matmul(Tensor(a), ad.reshape(t, (4, 1))), (4,)),
                     Tensor(x), Tensor(v))
        np.testing.assert_allclose(out.data, a @ v, atol=1e-12)

    def test_identity(self):
        v = np.array([1.0, -2.0, 3.0])
        out = ad.jvp(lambda t: t, Tensor(np.zeros(3)), Tensor(v))
        np.testing.assert_array_equal(out.data, v)

    def test_two_layer_tanh_matches_central_difference(self):
        rng = np.random.default_rng(6)
        w1, b1 = Tensor(rng.standard_normal((4, 6))), Tensor(rng.standard_normal(6))
        w2, b2 = Tensor(rng.standard_normal((6, 3))), Tensor(rng.standard_normal(3))

        def f(t):
            return nn.linear(ad.tanh(nn.linear(t, w1, b1)), w2, b2)

        x = rng.standard_normal((2, 4))
        v = rng.standard_normal((2, 4))
        out = ad.jvp(f, Tensor(x), Tensor(v)).data
        eps = 1e-6
        fd = (f(Tensor(x + eps * v)).data - f(Tensor(x - eps * v)).data) / (2 * eps)
        assert np.abs(out - fd).max() < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.jvp(lambda t: t, Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestGradCheck:
    def test_linear_bias_layer(self):
        rng = np.random.default_rng(7)
        w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        x = Tensor(rng.standard_normal((4, 3)))
        err = ad.grad_check(lambda: ad.reduce_sum(ad.tanh(nn.linear(x, w, b))), [w, b])
        assert err < 1e-6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_propagates_as_failure(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        err = ad.grad_check(lambda: ad.log(ad.sub(w, Tensor(2.0))).sum(), [w])
        assert np.isnan(err)


PRIMITIVES = [
    ("add", lambda t, r: ad.add(t, Tensor(r.standard_normal(t.shape)))),
    ("add_bias", lambda t, r: ad.add(t, Tensor(r.standard_normal(t.shape[-1])))),
    ("sub", lambda t, r: ad.sub(Tensor(r.standard_normal(t.shape)), t)),
    ("mul", lambda t, r: ad.mul(t, Tensor(r.standard_normal(t.shape)))),
    ("neg", lambda t, r: ad.neg(t)),
    ("exp", lambda t, r: ad.exp(t)),
    ("tanh", lambda t, r: ad.tanh(t)),
    ("softplus", lambda t, r: ad.softplus(t)),
    ("relu", lambda t, r: ad.relu(t)),
    ("power", lambda t, r: ad.power(ad.add(ad.mul(t, t), Tensor(0.5)), 1.5)),
    ("sum_all", lambda t, r: ad.reshape(ad.reduce_sum(t), (1, 1))),
    ("sum_axis", lambda t, r: ad.reduce_sum(t, axis=1, keepdims=True)),
    ("mean", lambda t, r: ad.reduce_mean(t, axis=0, keepdims=True)),
    ("reshape", lambda t, r: ad.reshape(t, (t.size,))),
    ("transpose", lambda t, r: ad.transpose(t)),
    ("expand", lambda t, r: ad.expand(ad.reduce_sum(t, axis=0, keepdims=True), t.shape)),
    ("getitem", lambda t, r: t[1:, :2]),
    ("concat", lambda t, r: ad.concat([t, ad.mul(t, t)], axis=1)),
]


@pytest.mark.parametrize("name,op", PRIMITIVES, ids=[n for n, _ in PRIMITIVES])
def test_primitive_gradients_match_finite_differences(name, op):
    """Every primitive: analytic vs central differences away from kinks."""
    rng = np.random.default_rng(hash(name) % 2**32)
    base = rng.standard_normal((3, 4))
    base[np.abs(base) < 1e-3] = 0.1  # keep relu away from its kink
    t = Tensor(base, requires_grad=True)
    weight = Tensor(rng.standard_normal(op(t, rng).shape))

    def f():
        return ad.reduce_sum(ad.mul(op(t, np.random.default_rng(0)), weight))

    err = ad.grad_check(f, [t])
    assert err < 1e-6, f"{name}: {err}"


@pytest.mark.parametrize("name,op", PRIMITIVES, ids=[n for n, _ in PRIMITIVES])
def test_primitive_jvp_matches_finite_differences(name, op):
    rng = np.random.default_rng(hash(name) % 2**31)
    base = rng.standard_normal((3, 4))
    base[np.abs(base) < 1e-3] = 0.1
    v = rng.standard_normal((3, 4))
    out = ad.jvp(lambda t: op(t, np.random.default_rng(0)), Tensor(base), Tensor(v)).data
    eps = 1e-6
    rng_op = lambda arr: op(Tensor(arr), np.random.default_rng(0)).data
    fd = (rng_op(base + eps * v) - rng_op(base - eps * v)) / (2 * eps)
    assert np.abs(out - fd).max() < 1e-6, name
