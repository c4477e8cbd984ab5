"""Numerical core: primitives, their gradients, and the finite-difference oracle."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casm import autodiff as ad
from casm.errors import ConfigError, NumericalError, ProtocolError


def triple_loop_matmul(a, b):
    """Hand-rolled O(n^3) product; the independent oracle for matmul."""
    n, m = a.shape
    m2, p = b.shape
    assert m == m2
    out = np.zeros((n, p), dtype=np.result_type(a, b))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for k in range(m):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((2, 2))
        out = ad.matmul(None, ad.Node(np.eye(2)), ad.Node(m))
        np.testing.assert_array_equal(out.value, m)

    def test_zeros(self, rng):
        z = np.zeros((2, 3))
        m = rng.standard_normal((3, 4))
        out = ad.matmul(None, ad.Node(z), ad.Node(m))
        np.testing.assert_array_equal(out.value, np.zeros((2, 4)))

    def test_triple_loop_oracle_exact(self, rng):
        # Integer-valued entries make every accumulation order exact in
        # float64, so BLAS and the sequential oracle must agree bitwise.
        for _ in range(20):
            a = rng.integers(-8, 9, size=(3, 3)).astype(np.float64)
            b = rng.integers(-8, 9, size=(3, 3)).astype(np.float64)
            out = ad.matmul(None, ad.Node(a), ad.Node(b)).value
            np.testing.assert_array_equal(out, triple_loop_matmul(a, b))

    def test_triple_loop_oracle_float(self, rng):
        for n in (2, 3, 5, 8):
            a = rng.standard_normal((n, n))
            b = rng.standard_normal((n, n))
            out = ad.matmul(None, ad.Node(a), ad.Node(b)).value
            np.testing.assert_allclose(out, triple_loop_matmul(a, b),
                                       rtol=1e-13, atol=1e-13)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ConfigError, match=r"\(2, 3\).*\(4, 2\)"):
            ad.matmul(None, ad.Node(np.zeros((2, 3))), ad.Node(np.zeros((4, 2))))

    def test_backward_rule(self, rng):
        a = ad.Param("a", rng.standard_normal((3, 4)))
        b = ad.Param("b", rng.standard_normal((4, 2)))
        tape = ad.Tape()
        out = ad.matmul(tape, a, b)
        g = rng.standard_normal(out.value.shape)
        loss = ad.weighted_sum(tape, out, g)
        tape.backward(loss, [a, b])
        np.testing.assert_allclose(a.grad, g @ b.value.T, rtol=1e-12)
        np.testing.assert_allclose(b.grad, a.value.T @ g, rtol=1e-12)


class TestSoftmaxRows:
    def test_symmetry(self):
        np.testing.assert_allclose(ad.softmax_rows([[1.0, 1.0]]), [[0.5, 0.5]])

    def test_forced_quarters(self):
        out = ad.softmax_rows([[0.0, math.log(3.0)]])
        np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=1e-12)

    def test_mask_limit(self):
        out = ad.softmax_rows([[0.0, -1e9]])
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(
            st.lists(
                st.one_of(
                    st.floats(-50, 50),
                    st.just(-1e9),
                ),
                min_size=1, max_size=6,
            ).map(tuple),
            min_size=1, max_size=4,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    def test_rows_sum_to_one(self, rows):
        out = ad.softmax_rows(np.array(rows, dtype=np.float64))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


class TestActivations:
    def test_relu(self):
        out = ad.relu(None, ad.Node(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.value, [0.0, 0.0, 2.0])

    def test_sigmoid_zero(self):
        assert ad.sigmoid(0.0) == pytest.approx(0.5)

    def test_sigmoid_forced_three_quarters(self):
        assert ad.sigmoid(math.log(3.0)) == pytest.approx(0.75, rel=1e-12)

    def test_sigmoid_stable_at_extremes(self):
        assert ad.sigmoid(1000.0) == pytest.approx(1.0)
        assert ad.sigmoid(-1000.0) == pytest.approx(0.0)
        out = ad.sigmoid(np.array([-40.0, 0.0, 40.0]))
        assert np.all(np.isfinite(out))


class TestFiniteDiffCheck:
    def test_quadratic(self):
        x = ad.Param("x", np.array([1.0]))

        def loss_fn():
            x.zero_grad()
            x.grad[:] = 2.0 * x.value  # analytic d/dx x^2
            return float(x.value[0] ** 2)

        err = ad.finite_diff_check(loss_fn, [x], epsilon=1e-5, samples=1)
        assert err < 1e-9

    def test_logistic_regression_closed_form(self, rng):
        # One linear layer + binary cross-entropy on a single sample has the
        # textbook gradient (p - y) * x; the checker must agree to 1e-6.
        w = ad.Param("w", rng.standard_normal((3, 1)) * 0.5)
        b = ad.Param("b", np.zeros(1))
        x = np.array([[0.7, -1.2, 0.4]])

        def loss_fn():
            tape = ad.Tape()
            logit = ad.add_bias(tape, ad.matmul(tape, ad.Node(x), w), b)
            p = ad.sigmoid(logit.value[0, 0])
            loss = ad.Node(-math.log(p))

            def backward():
                ad._accum(logit, np.array([[p - 1.0]]) * loss.grad)

            tape.record(backward)
            tape.backward(loss, [w, b])
            return loss.value

        err = ad.finite_diff_check(loss_fn, [w, b], samples=4,
                                   rng=np.random.default_rng(0))
        assert err < 1e-6
        # Direct closed-form agreement as well.
        loss_fn()
        p = ad.sigmoid(float((x @ w.value + b.value)[0, 0]))
        np.testing.assert_allclose(w.grad, (p - 1.0) * x.T, rtol=1e-12)

    def test_nondeterministic_loss_rejected(self):
        x = ad.Param("x", np.array([1.0]))
        calls = iter(range(100))

        def loss_fn():
            return float(next(calls))

        with pytest.raises(ProtocolError):
            ad.finite_diff_check(loss_fn, [x], samples=1)


def _grad_check_primitive(build, params, samples=20, seed=0, tol=1e-4):
    """Generic per-primitive gradient check against central differences."""

    def loss_fn():
        tape = ad.Tape()
        out = build(tape)
        loss = out if np.isscalar(out.value) else None
        assert loss is not None
        tape.backward(loss, params)
        return loss.value

    err = ad.finite_diff_check(loss_fn, params, samples=samples,
                               rng=np.random.default_rng(seed))
    assert err < tol, f"gradient mismatch: {err}"


class TestPrimitiveGradients:
    """Analytic gradients of every primitive vs central differences (64-bit)."""

    def test_matmul_random_shapes(self, rng):
        for _ in range(5):
            n, m, p = (int(x) for x in rng.integers(1, 7, size=3))
            a = ad.Param("a", rng.standard_normal((n, m)))
            b = ad.Param("b", rng.standard_normal((m, p)))
            w = rng.standard_normal((n, p))
            _grad_check_primitive(
                lambda t: ad.weighted_sum(t, ad.matmul(t, a, b), w), [a, b]
            )

    def test_add_bias_and_add(self, rng):
        x = ad.Param("x", rng.standard_normal((4, 3)))
        b = ad.Param("b", rng.standard_normal(3))
        w = rng.standard_normal((4, 3))
        _grad_check_primitive(
            lambda t: ad.weighted_sum(t, ad.add(t, ad.add_bias(t, x, b), x), w),
            [x, b],
        )

    def test_relu_away_from_kink(self, rng):
        vals = rng.standard_normal((4, 3))
        vals[np.abs(vals) < 0.1] = 0.5  # finite differences break at the kink
        x = ad.Param("x", vals)
        w = rng.standard_normal((4, 3))
        _grad_check_primitive(lambda t: ad.weighted_sum(t, ad.relu(t, x), w), [x])

    def test_softmax(self, rng):
        x = ad.Param("x", rng.standard_normal((3, 5)))
        w = rng.standard_normal((3, 5))
        _grad_check_primitive(lambda t: ad.weighted_sum(t, ad.softmax(t, x), w), [x])

    def test_embedding_lookup(self, rng):
        table = ad.Param("tab", rng.standard_normal((6, 3)))
        ids = np.array([2, 0, 2, 5])
        w = rng.standard_normal((4, 3))
        _grad_check_primitive(
            lambda t: ad.weighted_sum(t, ad.embedding_lookup(t, table, ids), w),
            [table],
        )

    def test_concat_cols(self, rng):
        a = ad.Param("a", rng.standard_normal((3, 2)))
        b = ad.Param("b", rng.standard_normal((3, 4)))
        w = rng.standard_normal((3, 6))
        _grad_check_primitive(
            lambda t: ad.weighted_sum(t, ad.concat_cols(t, a, b), w), [a, b]
        )

    def test_add_positional(self, rng):
        x = ad.Param("x", rng.standard_normal((6, 3)))
        pos = ad.Param("pos", rng.standard_normal((3, 3)))
        w = rng.standard_normal((6, 3))
        _grad_check_primitive(
            lambda t: ad.weighted_sum(t, ad.add_positional(t, x, pos, 2, 3), w),
            [x, pos],
        )

    def test_rowwise_dot(self, rng):
        a = ad.Param("a", rng.standard_normal((4, 3)))
        b = ad.Param("b", rng.standard_normal((4, 3)))
        w = rng.standard_normal(4)
        _grad_check_primitive(
            lambda t: ad.weighted_sum(t, ad.rowwise_dot(t, a, b), w), [a, b]
        )

    def test_layer_norm(self, rng):
        x = ad.Param("x", rng.standard_normal((4, 5)))
        g = ad.Param("g", 1.0 + 0.1 * rng.standard_normal(5))
        b = ad.Param("b", 0.1 * rng.standard_normal(5))
        w = rng.standard_normal((4, 5))
        _grad_check_primitive(
            lambda t: ad.weighted_sum(t, ad.layer_norm(t, x, g, b), w), [x, g, b]
        )

    def test_masked_attention_random_shapes(self, rng):
        for B, L, H, dh in ((2, 4, 2, 3), (1, 5, 1, 4), (3, 3, 3, 2)):
            d = H * dh
            q = ad.Param("q", rng.standard_normal((B * L, d)))
            k = ad.Param("k", rng.standard_normal((B * L, d)))
            v = ad.Param("v", rng.standard_normal((B * L, d)))
            mask = np.zeros((B, L), dtype=np.uint8)
            for b in range(B):
                mask[b, int(rng.integers(0, L)):] = 1
            w = rng.standard_normal((B * L, d))
            _grad_check_primitive(
                lambda t: ad.weighted_sum(
                    t, ad.masked_attention(t, q, k, v, mask, B, L, H), w
                ),
                [q, k, v], samples=40,
            )

    def test_dropout_backward_matches_mask(self, rng):
        x = ad.Param("x", rng.standard_normal((5, 4)))
        tape = ad.Tape()
        out = ad.dropout(tape, x, 0.5, np.random.default_rng(3))
        w = np.ones_like(out.value)
        loss = ad.weighted_sum(tape, out, w)
        tape.backward(loss, [x])
        kept = out.value != 0
        np.testing.assert_allclose(x.grad[kept], 2.0)  # 1/(1-rate)
        np.testing.assert_allclose(x.grad[~kept], 0.0)


class TestTape:
    def test_backward_visits_exact_reverse_order(self):
        tape = ad.Tape()
        visited = []
        for i in range(5):
            tape.record(lambda i=i: visited.append(i))
        tape.backward(ad.Node(0.0))
        assert visited == [4, 3, 2, 1, 0]

    def test_param_grads_zeroed_at_backward_start(self, rng):
        a = ad.Param("a", rng.standard_normal((2, 2)))
        a.grad[:] = 123.0  # stale gradient from a previous pass
        tape = ad.Tape()
        out = ad.weighted_sum(tape, a, np.ones((2, 2)))
        tape.backward(out, [a])
        np.testing.assert_array_equal(a.grad, np.ones((2, 2)))


class TestDeterminism:
    def test_ops_bitwise_reproducible(self, rng):
        a = rng.standard_normal((6, 6)).astype(np.float32)
        b = rng.standard_normal((6, 6)).astype(np.float32)
        r1 = ad.matmul(None, ad.Node(a), ad.Node(b)).value
        r2 = ad.matmul(None, ad.Node(a), ad.Node(b)).value
        np.testing.assert_array_equal(r1, r2)
        s1 = ad.softmax_rows(a)
        s2 = ad.softmax_rows(a)
        np.testing.assert_array_equal(s1, s2)


class TestStrictChecks:
    def test_nan_rejected(self):
        with pytest.raises(NumericalError):
            ad.matmul(None, ad.Node(np.array([[np.nan]])), ad.Node(np.eye(1)))
