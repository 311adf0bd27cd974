"""Autodiff engine: forward values, backward rules vs central finite
differences, broadcasting limits, and graph contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loradrop import tensor as T
from loradrop.errors import ContractError, DegeneracyError, DimensionError, NumericError
from loradrop.gradcheck import compare_grads, finite_diff_grad

RNG = np.random.default_rng(1234)


def fd_check(f, x, tol=1e-6, h=1e-5):
    """Autodiff vs central differences for a scalar-valued f."""
    x.zero_grad()
    out = f(x)
    T.backward(out)
    numeric = finite_diff_grad(f, x, h=h)
    rep = compare_grads("x", x.grad, numeric, tol)
    assert rep.passed, f"rel error {rep.max_rel_error:.3e} (abs {rep.max_abs_error:.3e})"


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_inner_product(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_backward_matches_finite_differences(self):
        a = T.Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
        b = T.Tensor(RNG.normal(size=(4, 2)))
        w = T.Tensor(RNG.normal(size=(3, 2)))
        fd_check(lambda t: T.sum_(T.mul(T.matmul(t, b), w)), a)

    def test_batched_backward(self):
        a = T.Tensor(RNG.normal(size=(2, 3, 4, 5)), requires_grad=True)
        b = T.Tensor(RNG.normal(size=(2, 3, 5, 4)))
        fd_check(lambda t: T.sum_(T.matmul(t, b)), a)

    def test_broadcast_weight_backward(self):
        w = T.Tensor(RNG.normal(size=(4, 6)), requires_grad=True)
        x = T.Tensor(RNG.normal(size=(3, 5, 4)))
        fd_check(lambda t: T.sum_(T.exp(T.scale(T.matmul(x, t), 0.1))), w)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as err:
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


class TestSoftmax:
    def test_symmetric(self):
        out = T.softmax_row(T.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=0)

    def test_direct_evaluation(self):
        # direct exp/sum oracle
        e = np.exp([1.0, 2.0, 3.0])
        expected = e / e.sum()
        out = T.softmax_row(T.Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out.data, expected, rtol=1e-15)
        np.testing.assert_allclose(out.data, [0.090031, 0.244728, 0.665241], atol=5e-7)

    def test_neg_inf_entry_is_exact_zero(self):
        out = T.softmax_row(T.Tensor([1.0, 2.0, -np.inf]))
        e = np.exp([1.0, 2.0])
        np.testing.assert_allclose(out.data[:2], e / e.sum(), rtol=1e-15)
        assert out.data[2] == 0.0
        np.testing.assert_allclose(out.data, [0.268941, 0.731059, 0.0], atol=5e-7)

    def test_all_neg_inf_row_rejected(self):
        with pytest.raises(DegeneracyError):
            T.softmax_row(T.Tensor([-np.inf, -np.inf]))

    def test_backward_matches_finite_differences(self):
        x = T.Tensor(RNG.normal(size=(4, 7)), requires_grad=True)
        w = T.Tensor(RNG.normal(size=(4, 7)))
        fd_check(lambda t: T.sum_(T.mul(T.softmax_row(t), w)), x)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=16))
    @settings(max_examples=200, deadline=None)
    def test_rows_sum_to_one(self, row):
        out = T.softmax_row(T.Tensor(row)).data
        assert abs(out.sum() - 1.0) <= 1e-12
        assert np.all(out >= 0.0) and np.all(out <= 1.0)


class TestDetach:
    def test_gradient_stopped(self):
        x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        y = T.detach(x)
        out = T.sum_(y)
        # no backward edge at all: the detached sum is a leaf
        assert out.requires_grad is False
        T.backward(T.add(T.sum_(x), out))
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_value_invariance(self):
        x = T.Tensor(RNG.uniform(1, 2, size=5), requires_grad=True)
        direct = T.div(x, T.sum_(x, keepdims=True))
        stopped = T.div(x, T.detach(T.sum_(x, keepdims=True)))
        np.testing.assert_array_equal(direct.data, stopped.data)


class TestElementwise:
    def test_masked_fill_writes_value(self):
        x = T.Tensor([1.0, 2.0, 3.0])
        out = T.masked_fill(x, np.array([False, False, True]), -np.inf)
        assert out.data[2] == -np.inf and out.data[1] == 2.0

    def test_masked_fill_blocks_gradient(self):
        x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        out = T.sum_(T.masked_fill(x, np.array([False, True, False]), 0.0))
        T.backward(out)
        np.testing.assert_array_equal(x.grad, [1.0, 0.0, 1.0])

    def test_exp_log_inverse_pair(self):
        x = RNG.uniform(0.1, 5.0, size=64)
        out = T.exp(T.log(T.Tensor(x)))
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_gelu_backward_matches_finite_differences(self):
        x = T.Tensor(RNG.normal(size=(50,)), requires_grad=True)
        fd_check(lambda t: T.sum_(T.gelu(t)), x)

    def test_div_by_zero_raises(self):
        with pytest.raises(NumericError):
            T.div(T.Tensor([1.0]), T.Tensor([0.0]))

    def test_log_nonpositive_raises(self):
        with pytest.raises(NumericError):
            T.log(T.Tensor([0.0, 1.0]))

    def test_trailing_broadcast_allowed(self):
        x = T.Tensor(np.zeros((2, 3, 4)))
        bias = T.Tensor(np.ones(4))
        assert T.add(x, bias).shape == (2, 3, 4)
        rowscale = T.Tensor(np.ones((2, 3, 1)))
        assert T.mul(x, rowscale).shape == (2, 3, 4)

    def test_fancy_broadcast_rejected(self):
        with pytest.raises(DimensionError):
            T.add(T.Tensor(np.zeros((3, 1))), T.Tensor(np.zeros(4)))

    def test_layer_norm_backward(self):
        x = T.Tensor(RNG.normal(size=(6, 8)), requires_grad=True)
        g = T.Tensor(RNG.uniform(0.5, 1.5, size=8))
        b = T.Tensor(RNG.normal(size=8))
        fd_check(lambda t: T.sum_(T.mul(T.layer_norm(t, g, b), T.Tensor(RNG2))), x)

    def test_layer_norm_param_grads(self):
        x = T.Tensor(RNG.normal(size=(6, 8)))
        g = T.Tensor(RNG.uniform(0.5, 1.5, size=8), requires_grad=True)
        fd_check(lambda t: T.sum_(T.exp(T.scale(T.layer_norm(x, t, T.Tensor(np.zeros(8))), 0.3))), g)


RNG2 = np.random.default_rng(77).normal(size=(6, 8))


class TestBackwardDriver:
    def test_sum_gives_ones(self):
        x = T.Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
        T.backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic(self):
        x = T.Tensor([1.0, -2.0, 3.0], requires_grad=True)
        T.backward(T.sum_(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0], rtol=1e-15)

    def test_accumulation_without_reset(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.sum_(x))
        T.backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_root_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(T.mul(x, 2.0))

    def test_diamond_graph_counts_paths(self):
        x = T.Tensor([2.0], requires_grad=True)
        y = T.mul(x, 3.0)
        out = T.sum_(T.add(y, y))
        T.backward(out)
        np.testing.assert_allclose(x.grad, [6.0])


class TestFiniteDiff:
    def test_sum_gradient_is_ones(self):
        x = T.Tensor(RNG.normal(size=5))
        g = finite_diff_grad(lambda t: T.sum_(t), x)
        np.testing.assert_allclose(g, np.ones(5), atol=1e-9)

    def test_softmax_pick_first_at_symmetric_point(self):
        # analytic softmax Jacobian at [0,0]: diag p(1-p)=0.25, off -p*q=-0.25
        x = T.Tensor([0.0, 0.0])
        g = finite_diff_grad(lambda t: T.sum_(T.mul(T.softmax_row(t), T.Tensor([1.0, 0.0]))), x)
        np.testing.assert_allclose(g, [0.25, -0.25], atol=1e-9)

    def test_random_graph_self_consistency(self):
        for i in range(5):
            rng = np.random.default_rng(100 + i)
            x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            a = T.Tensor(rng.normal(size=(4, 3)))

            def f(t):
                z = T.matmul(t, a)
                z = T.gelu(z)
                z = T.softmax_row(z)
                return T.mean(T.mul(z, z))

            fd_check(f, x)


class TestPerOpGradientProperty:
    """Every differentiable op vs central differences over >= 100 random
    instances, max relative error <= 1e-6."""

    def test_sweep(self):
        rng = np.random.default_rng(7)

        # every factory pre-draws its constants so the returned closure is
        # deterministic under repeated evaluation (fd requirement)
        def factories(shape, r):
            m, n = shape
            c = T.Tensor(r.normal(size=shape))
            pos = T.Tensor(r.uniform(0.5, 2.0, size=shape))
            col = T.Tensor(r.normal(size=(n,)))
            row1 = T.Tensor(r.normal(size=(m, 1)))
            mask = r.random(shape) < 0.3
            w_nm = T.Tensor(r.normal(size=(n, 3)))
            w_m3 = T.Tensor(r.normal(size=(m, 3)))
            gamma = T.Tensor(r.uniform(0.5, 1.5, size=n))
            beta = T.Tensor(r.normal(size=n))
            flatw = T.Tensor(r.normal(size=m * n))
            return [
                lambda t: T.sum_(T.add(t, c)),
                lambda t: T.sum_(T.sub(c, t)),
                lambda t: T.sum_(T.mul(t, c)),
                lambda t: T.sum_(T.div(t, pos)),
                lambda t: T.sum_(T.div(c, T.add(T.mul(t, t), 1.0))),
                lambda t: T.sum_(T.scale(t, 1.7)),
                lambda t: T.sum_(T.neg(t)),
                lambda t: T.sum_(T.exp(T.scale(t, 0.5))),
                lambda t: T.sum_(T.log(T.add(T.mul(t, t), 1.0))),
                lambda t: T.sum_(T.mul(T.relu(t), c)),
                lambda t: T.sum_(T.gelu(t)),
                lambda t: T.sum_(T.mul(T.softmax_row(t), c)),
                lambda t: T.mean(T.mul(t, t)),
                lambda t: T.sum_(T.mul(T.sum_(t, axis=0), col)),
                lambda t: T.sum_(T.mul(T.mean(t, axis=1, keepdims=True), row1)),
                lambda t: T.sum_(T.masked_fill(t, mask, 0.5)),
                lambda t: T.sum_(T.clamp_min(t, 0.1)),
                lambda t: T.sum_(T.mul(T.transpose(t), T.transpose(c))),
                lambda t: T.sum_(T.mul(T.reshape(t, (t.size,)), flatw)),
                lambda t: T.sum_(T.mul(T.matmul(t, w_nm), w_m3)),
                lambda t: T.sum_(T.mul(T.layer_norm(t, gamma, beta), c)),
            ]

        checked = 0
        n_factories = len(factories((2, 2), np.random.default_rng(0)))
        for fi in range(n_factories):
            for _ in range(5):
                shape = (int(rng.integers(2, 5)), int(rng.integers(2, 6)))
                fns = factories(shape, rng)
                x = T.Tensor(rng.normal(size=shape), requires_grad=True)
                fd_check(fns[fi], x)
                checked += 1
        assert checked >= 100


class TestDeterminism:
    def test_bit_identical_forward(self):
        def run():
            rng = np.random.default_rng(9)
            x = T.Tensor(rng.normal(size=(4, 8)))
            w = T.Tensor(rng.normal(size=(8, 8)))
            return T.softmax_row(T.gelu(T.matmul(x, w))).data

        a, b = run(), run()
        assert np.array_equal(a, b)


class TestThreadConfinement:
    def test_independent_graphs_in_parallel_threads(self):
        # grad mode is per-thread: a no_grad block in one thread must not
        # disable recording in another
        import threading

        results = {}

        def with_grad():
            x = T.Tensor([1.0, 2.0], requires_grad=True)
            for _ in range(200):
                T.backward(T.sum_(T.mul(x, x)))
                results["grad"] = x.grad.copy()
                x.zero_grad()

        def without_grad():
            with T.no_grad():
                for _ in range(200):
                    y = T.mul(T.Tensor([3.0], requires_grad=True), 2.0)
                    results["nograd_requires"] = y.requires_grad

        threads = [threading.Thread(target=with_grad), threading.Thread(target=without_grad)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        np.testing.assert_allclose(results["grad"], [2.0, 4.0])
        assert results["nograd_requires"] is False
