"""Autodiff core: forward values, error contracts, gradients vs finite
differences, tape bookkeeping and the op census."""

import numpy as np
import pytest

import mgnt.tensor as T
from mgnt.errors import NumericError, ShapeError, ValidationError
from mgnt.tensor import Tape, Tensor, grad_check


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_projection(self):
        p = Tensor([[1.0, 0.0], [0.0, 0.0]])
        v = Tensor([[5.0], [7.0]])
        np.testing.assert_array_equal(T.matmul(p, v).data, [[5.0], [0.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_random_3x3(self):
        rng = np.random.default_rng(0)
        a, b = Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal((3, 3)))
        err = grad_check(lambda u, w: T.sum_all(T.mul(T.matmul(u, w), T.matmul(u, w))),
                         [a, b], step=1e-5)
        assert err < 1e-6


class TestLeakyRelu:
    def test_positive_passthrough(self):
        assert T.leaky_relu(Tensor([2.0]), 0.01).data[0] == 2.0

    def test_negative_scaled(self):
        assert T.leaky_relu(Tensor([-1.0]), 0.01).data[0] == pytest.approx(-0.01)

    def test_gradient_at_negative_point(self):
        x = Tensor([-3.0])
        with Tape() as tape:
            y = T.sum_all(T.leaky_relu(x, 0.01))
            (g,) = tape.gradients(y, [x])
        assert g[0] == pytest.approx(0.01)
        assert grad_check(lambda u: T.sum_all(T.leaky_relu(u, 0.01)), [x]) < 1e-6

    def test_subgradient_at_zero_is_slope(self):
        x = Tensor([0.0])
        with Tape() as tape:
            y = T.sum_all(T.leaky_relu(x, 0.25))
            (g,) = tape.gradients(y, [x])
        assert g[0] == 0.25

    def test_slope_bounds(self):
        with pytest.raises(ValidationError):
            T.leaky_relu(Tensor([1.0]), 1.5)


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        out = T.layer_norm(Tensor([[1.0, 1.0, 1.0]]), Tensor(np.ones(3)),
                           Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_standardized_row_fixed_point(self):
        out = T.layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)),
                           Tensor(np.zeros(2)), eps=1e-14)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_gradient_random(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((4, 8)))
        g = Tensor(rng.standard_normal(8))
        b = Tensor(rng.standard_normal(8))
        err = grad_check(
            lambda u, gg, bb: T.sum_all(T.mul(T.layer_norm(u, gg, bb), u)), [x, g, b])
        assert err < 1e-6

    def test_eps_positive(self):
        with pytest.raises(ValidationError):
            T.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]), eps=0.0)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0]), axis=0).data, [0.5, 0.5])

    def test_large_logits_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]), axis=0).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_gradient_random(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal(6))
        probe = Tensor(rng.standard_normal(6))
        err = grad_check(
            lambda u: T.sum_all(T.mul(T.softmax(u, axis=0), probe)), [x])
        assert err < 1e-6

    def test_rows_positive_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.standard_normal((5, 7)) * rng.uniform(0.1, 50)
            y = T.softmax(Tensor(x), axis=1).data
            assert (y >= 0).all()
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor([1.0]), axis=3)


class TestSegmentSum:
    def test_basic(self):
        # rows 0,1 land in segment 0 (1+2), row 2 in segment 1, segment 2 empty
        out = T.segment_sum(Tensor([[1.0], [2.0], [3.0]]), np.array([0, 0, 1]), 3)
        np.testing.assert_array_equal(out.data, [[3.0], [3.0], [0.0]])

    def test_empty_edges(self):
        out = T.segment_sum(Tensor(np.zeros((0, 4))), np.zeros(0, dtype=int), 5)
        np.testing.assert_array_equal(out.data, np.zeros((5, 4)))

    def test_gradient_scatters(self):
        rng = np.random.default_rng(4)
        vals = Tensor(rng.standard_normal((6, 2)))
        ids = np.array([0, 2, 2, 1, 0, 2])
        err = grad_check(
            lambda u: T.sum_all(T.mul(T.segment_sum(u, ids, 3),
                                      T.segment_sum(u, ids, 3))), [vals])
        assert err < 1e-6

    def test_out_of_range_id(self):
        with pytest.raises(ValidationError, match="out of range"):
            T.segment_sum(Tensor(np.ones((2, 1))), np.array([0, 5]), 3)

    def test_permuted_rows_bit_identical_for_exact_values(self):
        # integer-valued doubles add exactly, so reordering must not change bits
        rng = np.random.default_rng(5)
        vals = rng.integers(-50, 50, size=(40, 3)).astype(np.float64)
        ids = rng.integers(0, 7, size=40)
        base = T.segment_sum(Tensor(vals), ids, 7).data
        perm = rng.permutation(40)
        permuted = T.segment_sum(Tensor(vals[perm]), ids[perm], 7).data
        assert np.array_equal(base, permuted)

    def test_same_input_same_bits(self):
        rng = np.random.default_rng(6)
        vals = rng.standard_normal((30, 2))
        ids = rng.integers(0, 4, size=30)
        a = T.segment_sum(Tensor(vals), ids, 4).data
        b = T.segment_sum(Tensor(vals), ids, 4).data
        assert np.array_equal(a, b)


class TestGradCheck:
    def test_square_at_three(self):
        err = grad_check(lambda x: T.mul(x, x), [Tensor([3.0])])
        assert err < 1e-8

    def test_composed_mlp_softmax(self):
        rng = np.random.default_rng(7)
        w0, b0 = Tensor(rng.standard_normal((5, 8))), Tensor(rng.standard_normal(8))
        w1 = Tensor(rng.standard_normal((8, 4)))
        x = Tensor(rng.standard_normal((3, 5)))
        probe = Tensor(rng.standard_normal((3, 4)))

        def f(xx, ww0, bb0, ww1):
            h = T.leaky_relu(T.add(T.matmul(xx, ww0), bb0), 0.01)
            return T.sum_all(T.mul(T.softmax(T.matmul(h, ww1), axis=1), probe))

        assert grad_check(f, [x, w0, b0, w1]) < 1e-5

    def test_wrong_gradient_rule_detected(self):
        def bad_square(x):
            out = Tensor(x.data * x.data, requires_grad=True)
            tape = Tape._active
            if tape is not None:
                tape.record(out, (x,), lambda g: [(x, g)], "bad_square", x.size)
            return out

        err = grad_check(lambda x: T.sum_all(bad_square(x)), [Tensor([2.0, -1.5])])
        assert err > 1e-2

    def test_step_bounds(self):
        with pytest.raises(ValidationError):
            grad_check(lambda x: T.sum_all(x), [Tensor([1.0])], step=1e-2)

    def test_nonfinite_detected(self):
        with pytest.raises(NumericError):
            grad_check(lambda x: T.sum_all(T.div(x, T.sub(x, x))), [Tensor([1.0])])


class TestTapeMechanics:
    def test_backward_visits_each_record_once(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
            z = T.add(y, y)
            loss = T.sum_all(z)
            n_records = len(tape.records)
            tape.gradients(loss, [x])
        assert n_records == 3

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = T.add(T.mul(x, x), T.mul(x, x))
            (g,) = tape.gradients(T.sum_all(y), [x])
        assert g[0] == pytest.approx(8.0)

    def test_tapes_do_not_nest(self):
        with Tape():
            with pytest.raises(ValidationError):
                with Tape():
                    pass

    def test_broadcast_bias_gradient(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((4, 3)))
        b = Tensor(rng.standard_normal(3))
        assert grad_check(lambda u, bb: T.sum_all(T.mul(T.add(u, bb), T.add(u, bb))),
                          [x, b]) < 1e-6

    def test_gather_slice_concat_grads(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((6, 3)))

        def f(u):
            g = T.gather_rows(u, np.array([0, 0, 4, 2]))
            s = T.slice_rows(u, 1, 4)
            c = T.concat([g, s], axis=0)
            return T.sum_all(T.mul(c, c))

        assert grad_check(f, [x]) < 1e-6

    def test_div_maximum_transpose_grads(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
        y = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)))

        def f(u, w):
            z = T.div(u, w)
            z = T.maximum_scalar(z, 0.8)
            return T.sum_all(T.mul(T.transpose(z), T.transpose(z)))

        assert grad_check(f, [x, y]) < 1e-6


class TestCensus:
    def test_counts_by_scope(self):
        x = Tensor(np.ones((4, 4)))
        with Tape() as tape:
            with tape.scope("stage_a"):
                T.matmul(x, x)
            with tape.scope("stage_b"):
                T.add(x, x)
                T.add(x, x)
        census = tape.census()
        assert census["stage_a"]["matmul"] == (1, 2 * 4 * 4 * 4)
        assert census["stage_b"]["add"] == (2, 32)

    def test_forward_deterministic_same_seed(self):
        def run():
            rng = np.random.default_rng(123)
            x = Tensor(rng.standard_normal((5, 5)))
            return T.softmax(T.matmul(x, x), axis=1).data

        assert np.array_equal(run(), run())


def test_many_random_gradient_checks():
    """Primitive gradients across random shapes and seeds (spec-level sweep)."""
    rng = np.random.default_rng(42)
    worst = 0.0
    for trial in range(30):
        m, k, n = rng.integers(1, 5, size=3)
        a = Tensor(rng.standard_normal((m, k)))
        b = Tensor(rng.standard_normal((k, n)))
        probe = Tensor(rng.standard_normal((m, n)))
        worst = max(worst, grad_check(
            lambda u, w: T.sum_all(T.mul(T.matmul(u, w), probe)), [a, b]))
        x = Tensor(rng.standard_normal((m, k)))
        probe2 = Tensor(rng.standard_normal((m, k)))
        worst = max(worst, grad_check(
            lambda u: T.sum_all(T.mul(T.softmax(u, axis=1), probe2)), [x]))
    assert worst < 1e-5
