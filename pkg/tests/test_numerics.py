import math

import numpy as np
import pytest

from regionvqa.errors import BackwardError, ConfigurationError, DimensionError, NonDeterminismError
from regionvqa.numerics import Tensor, finite_diff_check, no_grad, ops, precision, relative_error
from regionvqa.numerics.nn import Linear, init_rng
from regionvqa.numerics.optim import Adam


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


class TestTensor:
    def test_default_precision_is_single(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_precision_context_restores(self):
        with precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_rejects_unsupported_precision(self):
        with pytest.raises(ValueError):
            with precision("float16"):
                pass

    def test_backward_twice_is_an_error(self):
        x = t64([1.0, 2.0], grad=True)
        y = ops.sum(ops.mul(x, x))
        y.backward()
        with pytest.raises(BackwardError):
            y.backward()

    def test_rerunning_forward_allows_backward_again(self):
        x = t64([1.0, 2.0], grad=True)
        ops.sum(ops.mul(x, x)).backward()
        x.zero_grad()
        ops.sum(ops.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_shared_subexpression_gradients_accumulate(self):
        x = t64([3.0], grad=True)
        y = ops.mul(x, x)
        z = ops.sum(ops.add(y, y))
        z.backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_no_grad_records_nothing(self):
        x = t64([1.0], grad=True)
        with no_grad():
            y = ops.mul(x, x)
        assert y.node is None and not y.requires_grad

    def test_forward_is_bitwise_deterministic(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        first = ops.softmax(ops.matmul(t64(a), t64(b))).data
        second = ops.softmax(ops.matmul(t64(a), t64(b))).data
        assert first.tobytes() == second.tobytes()


class TestMatmul:
    def test_identity(self):
        m = [[1.0, 2.0], [3.0, 4.0]]
        np.testing.assert_array_equal(ops.matmul(t64(np.eye(2)), t64(m)).data, m)

    def test_hand_example(self):
        out = ops.matmul(t64([[1, 2], [3, 4]]), t64([[5], [6]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ops.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_triple_loop(self, seed):
        rng = np.random.default_rng(seed)
        m, k, n = rng.integers(1, 17, 3)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        np.testing.assert_allclose(ops.matmul(t64(a), t64(b)).data, naive_matmul(a, b), rtol=0, atol=1e-10)

    def test_gradients(self):
        a, b = t64([[1.0, 2.0]], grad=True), t64([[3.0], [4.0]], grad=True)
        ops.matmul(a, b).backward(np.array([[1.0]]))
        np.testing.assert_array_equal(a.grad, [[3.0, 4.0]])
        np.testing.assert_array_equal(b.grad, [[1.0], [2.0]])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ops.softmax(t64(np.zeros(4))).data, [0.25] * 4)

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.5])
        np.testing.assert_allclose(ops.softmax(t64(x)).data, ops.softmax(t64(x + 123.4)).data, atol=1e-12)

    def test_two_point_example(self):
        e = math.exp(-10.0)
        expect = [1.0 / (1.0 + e), e / (1.0 + e)]
        got = ops.softmax(t64([10.0, 0.0])).data
        np.testing.assert_allclose(got, expect, rtol=1e-12)
        np.testing.assert_allclose(got, [0.9999546, 0.0000454], atol=5e-8)

    def test_flattened_domain_sums_to_one(self):
        y = ops.softmax(t64(np.random.default_rng(1).standard_normal((3, 4))), axis=None).data
        assert abs(y.sum() - 1.0) < 1e-12
        assert y.shape == (3, 4)

    def test_large_inputs_stay_finite(self):
        y = ops.softmax(t64([1000.0, 999.0])).data
        assert np.all(np.isfinite(y))

    def test_empty_domain(self):
        with pytest.raises(DimensionError):
            ops.softmax(t64(np.zeros((2, 0))))


class TestLayerNorm:
    def test_constant_row_gives_beta(self):
        g, b = t64(np.ones(3)), t64(np.full(3, 0.7))
        np.testing.assert_allclose(ops.layer_norm(t64([[5.0, 5.0, 5.0]]), g, b, 1e-5).data, [[0.7] * 3])

    def test_constant_row_zero_beta(self):
        out = ops.layer_norm(t64([[2.0, 2.0]]), t64(np.ones(2)), t64(np.zeros(2)), 1e-12)
        np.testing.assert_array_equal(out.data, [[0.0, 0.0]])

    def test_two_element_row(self):
        out = ops.layer_norm(t64([[1.0, 3.0]]), t64(np.ones(2)), t64(np.zeros(2)), 1e-14)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)

    def test_width_one_without_eps(self):
        with pytest.raises(ValueError):
            ops.layer_norm(t64([[1.0]]), t64([1.0]), t64([0.0]), 0.0)

    def test_negative_eps(self):
        with pytest.raises(ValueError):
            ops.layer_norm(t64([[1.0, 2.0]]), t64([1.0, 1.0]), t64([0.0, 0.0]), -1.0)

    def test_affine_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.layer_norm(t64([[1.0, 2.0]]), t64([1.0]), t64([0.0]), 1e-5)


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(ops.activation(t64([-1.0, 2.0]), "relu").data, [0.0, 2.0])

    def test_sigmoid_midpoint(self):
        assert ops.activation(t64([0.0]), "sigmoid").data[0] == 0.5

    def test_gelu_exact_form(self):
        expect = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        got = ops.activation(t64([1.0]), "gelu").data[0]
        assert got == pytest.approx(expect, rel=1e-14)
        assert got == pytest.approx(0.8412, abs=2e-4)  # 0.84134...

    def test_tanh(self):
        np.testing.assert_allclose(ops.activation(t64([0.5]), "tanh").data, [math.tanh(0.5)])

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            ops.activation(t64([0.0]), "swish")


class TestDropout:
    def test_identity_at_eval(self):
        x = t64(np.ones((3, 3)))
        assert ops.dropout(x, 0.5, np.random.default_rng(0), training=False) is x

    def test_seeded_mask_is_reproducible(self):
        x = t64(np.ones((4, 4)))
        a = ops.dropout(x, 0.5, np.random.default_rng(3), True).data
        b = ops.dropout(x, 0.5, np.random.default_rng(3), True).data
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 2.0}

    def test_training_needs_generator(self):
        with pytest.raises(ConfigurationError):
            ops.dropout(t64([1.0]), 0.1, None, True)


class TestShapes:
    def test_broadcast_only_trailing_vector(self):
        with pytest.raises(DimensionError):
            ops.add(t64(np.ones((2, 3))), t64(np.ones(2)))

    def test_bias_gradient_sums_rows(self):
        x, b = t64(np.ones((4, 2))), t64([0.0, 0.0], grad=True)
        ops.sum(ops.add(x, b)).backward()
        np.testing.assert_array_equal(b.grad, [4.0, 4.0])

    def test_conv2d_matches_direct_sum(self):
        rng = np.random.default_rng(2)
        x, w = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
        out = ops.conv2d(t64(x), t64(w), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    patch = xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    assert out[o, i, j] == pytest.approx(float((patch * w[o]).sum()), abs=1e-12)


class TestGradCheck:
    def test_square_sum(self):
        with precision("float64"):
            x = Tensor([1.0, 2.0, 3.0])
            report = finite_diff_check(lambda: ops.sum(ops.mul(x, x)), [x])
            assert report.passed
            assert report.worst < 1e-8
            x.requires_grad = True
            ops.sum(ops.mul(x, x)).backward()
            np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_linear_function_is_exact(self):
        with precision("float64"):
            x = Tensor([0.5, -1.0, 2.0])
            report = finite_diff_check(lambda: ops.sum(x), [x])
            assert report.worst < 1e-9

    def test_gelu_chain_fails_at_tiny_tolerance(self):
        with precision("float64"):
            x = Tensor(np.linspace(-2, 2, 7))
            f = lambda: ops.sum(ops.gelu(ops.gelu(x)))
            report = finite_diff_check(f, [x], tol=1e-12)
            assert not report.passed
            assert "FAIL" in report.summary()
            assert finite_diff_check(f, [x], tol=1e-4).passed

    def test_non_deterministic_function(self):
        with precision("float64"):
            x = Tensor([1.0, 2.0])
            rng = np.random.default_rng(0)
            with pytest.raises(NonDeterminismError):
                finite_diff_check(lambda: ops.sum(ops.dropout(x, 0.5, rng, True)), [x])

    def test_requires_double_precision(self):
        x = Tensor(np.ones(2, dtype=np.float32))
        with pytest.raises(ValueError):
            finite_diff_check(lambda: ops.sum(x), [x])

    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(1e-9 / 1e-5)
        assert relative_error(np.array([2.0]), np.array([1.0]))[0] == pytest.approx(0.5)

    def test_reports_one_entry_per_tensor(self):
        with precision("float64"):
            a, b = Tensor(np.ones((2, 2))), Tensor(np.ones((2, 1)))
            report = finite_diff_check(lambda: ops.sum(ops.matmul(a, b)), [a, b])
            assert len(report.max_rel_error) == 2


class TestModules:
    def test_init_streams_are_keyed_by_name(self):
        a = init_rng(0, "x").standard_normal(3)
        b = init_rng(0, "x").standard_normal(3)
        c = init_rng(0, "y").standard_normal(3)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_state_dict_round_trip(self):
        lin = Linear(3, 2, init_rng(0, "a"))
        other = Linear(3, 2, init_rng(1, "a"))
        other.load_state_dict(lin.state_dict())
        np.testing.assert_array_equal(other.weight.data, lin.weight.data)

    def test_adam_zero_rate_leaves_parameters(self):
        lin = Linear(3, 2, init_rng(0, "a"))
        before = lin.weight.data.copy()
        opt = Adam({"all": (lin.parameters(), 0.0)})
        ops.sum(lin(Tensor(np.ones((1, 3), np.float32)))).backward()
        assert opt.step(1.0) == {"all": 0.0}
        np.testing.assert_array_equal(lin.weight.data, before)
