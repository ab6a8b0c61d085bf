"""Tape/reverse-mode core: op semantics, backward vs the finite-difference
oracle, and the module invariants (finiteness, determinism, freezing)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loravit import autograd as ag
from loravit.autograd import Parameter, Tape, Tensor, finite_diff_grad, gradient_relative_error
from loravit.errors import ContractError, NumericError, OracleError, ShapeError


def tape_grad(f, x):
    """Reverse-mode gradient of scalar f at x via a fresh tape."""
    xt = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(xt)
    tape.backward(out)
    return Tensor(xt.grad)


def check_against_oracle(f, x, h=1e-4, tol=1e-6):
    analytic = tape_grad(f, x)
    numeric = finite_diff_grad(f, x, h=h)
    err = gradient_relative_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"


def rand64(rng, *shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestMatmul:
    def test_identity_left(self, rng):
        b = rand64(rng, 3, 5)
        out = ag.matmul(Tensor(np.eye(3)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_identity_right(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), dtype=np.float64)
        out = ag.matmul(a, Tensor(np.eye(2), dtype=np.float64))
        np.testing.assert_array_equal(out.data, a.data)

    def test_shape_mismatch_names_both_shapes(self, rng):
        with pytest.raises(ShapeError, match=r"\(4, 5\).*\(3, 2\)"):
            ag.matmul(rand64(rng, 4, 5), rand64(rng, 3, 2))

    def test_gradient_vs_finite_differences(self, rng):
        b = rand64(rng, 5, 3)
        check_against_oracle(lambda a: ag.sum_all(ag.matmul(a, b)), rand64(rng, 4, 5))

    def test_gradient_wrt_right_operand(self, rng):
        a = rand64(rng, 4, 5)
        check_against_oracle(lambda b: ag.sum_all(ag.matmul(a, b)), rand64(rng, 5, 3))

    def test_stacked_times_shared_weight(self, rng):
        w = rand64(rng, 4, 2)
        x = rand64(rng, 3, 5, 4)
        out = ag.matmul(x, w)
        assert out.shape == (3, 5, 2)
        check_against_oracle(lambda t: ag.sum_all(ag.matmul(t, w)), x)
        check_against_oracle(lambda t: ag.sum_all(ag.matmul(x, t)), w)

    def test_batched_both_sides(self, rng):
        a = rand64(rng, 2, 3, 4)
        b = rand64(rng, 2, 4, 5)
        weights = rng.standard_normal((2, 3, 5))
        wt = Tensor(weights, dtype=np.float64)
        check_against_oracle(lambda t: ag.sum_all(ag.mul(ag.matmul(t, b), wt)), a)
        check_against_oracle(lambda t: ag.sum_all(ag.mul(ag.matmul(a, t), wt)), b)


class TestSoftmaxRows:
    def test_zero_row_is_uniform(self):
        out = ag.softmax_rows(Tensor(np.zeros((1, 4))))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-7)

    def test_large_inputs_are_stable(self):
        out = ag.softmax_rows(Tensor(np.array([[1000.0, 1000.0]])))
        np.testing.assert_allclose(out.data, 0.5, atol=1e-7)

    def test_gradient_vs_finite_differences(self, rng):
        w = Tensor(rng.standard_normal((3, 7)), dtype=np.float64)
        check_against_oracle(
            lambda a: ag.sum_all(ag.mul(ag.softmax_rows(a), w)),
            rand64(rng, 3, 7),
            tol=1e-5,
        )

    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one_in_unit_interval(self, m, n, seed):
        data = np.random.default_rng(seed).uniform(-30, 30, size=(m, n))
        out = ag.softmax_rows(Tensor(data, dtype=np.float64)).data
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert ag.sigmoid(Tensor(np.zeros(1))).data[0] == pytest.approx(0.5)

    def test_sigmoid_extremes_stay_finite(self):
        out = ag.sigmoid(Tensor(np.array([-1000.0, 1000.0])))
        assert np.all(np.isfinite(out.data))

    def test_layer_norm_of_constant_vector_is_zero(self):
        x = Tensor(np.full((2, 8), 3.7), dtype=np.float32)
        gain = Tensor(np.ones(8, dtype=np.float32))
        bias = Tensor(np.zeros(8, dtype=np.float32))
        out = ag.layer_norm(x, gain, bias)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_gelu_gradient_at_0_7(self):
        x = Tensor(np.array([0.7]), dtype=np.float64)
        check_against_oracle(lambda t: ag.sum_all(ag.gelu(t)), x, tol=1e-5)

    def test_sqrt_gradient_defined_as_zero_at_zero(self):
        x = Tensor(np.array([0.0, 4.0]), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            out = ag.sum_all(ag.sqrt(x))
        tape.backward(out)
        np.testing.assert_allclose(x.grad, [0.0, 0.25])

    def test_add_broadcast_gradients(self, rng):
        b = rand64(rng, 4)
        check_against_oracle(lambda a: ag.sum_all(ag.add(a, b)), rand64(rng, 3, 4))
        a = rand64(rng, 3, 4)
        check_against_oracle(lambda t: ag.sum_all(ag.add(a, t)), b)

    def test_mixed_dtypes_rejected(self, rng):
        with pytest.raises(ContractError):
            ag.add(Tensor(np.zeros(3, dtype=np.float32)), Tensor(np.zeros(3, dtype=np.float64)))

    def test_clamp_passes_gradient_inside_range(self):
        x = Tensor(np.array([-2.0, 0.5, 2.0]), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            out = ag.sum_all(ag.clamp(x, 0.0, 1.0))
        tape.backward(out)
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


class TestShapeOps:
    def test_transpose_roundtrip_gradient(self, rng):
        x = rand64(rng, 2, 3, 4)
        w = Tensor(rng.standard_normal((4, 3, 2)), dtype=np.float64)
        check_against_oracle(
            lambda t: ag.sum_all(ag.mul(ag.transpose(t), w)), x
        )

    def test_reshape_gradient(self, rng):
        x = rand64(rng, 6, 4)
        w = Tensor(rng.standard_normal((3, 8)), dtype=np.float64)
        check_against_oracle(
            lambda t: ag.sum_all(ag.mul(ag.reshape(t, (3, 8)), w)), x
        )

    def test_concat_rows_gradient(self, rng):
        a = rand64(rng, 2, 3, 4)
        b = rand64(rng, 2, 2, 4)
        w = Tensor(rng.standard_normal((2, 5, 4)), dtype=np.float64)
        check_against_oracle(lambda t: ag.sum_all(ag.mul(ag.concat_rows(t, b), w)), a)
        check_against_oracle(lambda t: ag.sum_all(ag.mul(ag.concat_rows(a, t), w)), b)

    def test_take_rows_with_duplicate_indices(self, rng):
        x = rand64(rng, 5, 3)
        w = Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
        check_against_oracle(
            lambda t: ag.sum_all(ag.mul(ag.take_rows(t, [0, 2, 2, 4]), w)), x
        )

    def test_select_row_gradient(self, rng):
        x = rand64(rng, 2, 5, 3)
        w = Tensor(rng.standard_normal((2, 3)), dtype=np.float64)
        check_against_oracle(
            lambda t: ag.sum_all(ag.mul(ag.select_row(t, 0), w)), x
        )

    def test_broadcast_to_gradient(self, rng):
        x = rand64(rng, 1, 4)
        w = Tensor(rng.standard_normal((3, 2, 4)), dtype=np.float64)
        check_against_oracle(
            lambda t: ag.sum_all(ag.mul(ag.broadcast_to(t, (3, 2, 4)), w)), x
        )


class TestBackward:
    def test_linear_scale(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            out = ag.sum_all(ag.scale(x, 2.0))
        tape.backward(out)
        np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0, dtype=np.float32))

    def test_mean_grad_is_one_over_n(self):
        x = Tensor(np.arange(8.0), requires_grad=True)
        with Tape() as tape:
            out = ag.mean_all(x)
        tape.backward(out)
        np.testing.assert_allclose(x.grad, 1.0 / 8.0)

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            out = ag.scale(x, 1.0)
        with pytest.raises(ContractError):
            tape.backward(out)

    def test_composite_ce_sigmoid_matmul_chain(self, rng):
        w2 = rand64(rng, 5, 1)
        labels = np.array([1.0, 0.0, 1.0])

        def loss(w):
            x = Tensor(rng_fixed, dtype=np.float64)
            p = ag.sigmoid(ag.reshape(ag.matmul(x, w), (3,)))
            p = ag.clamp(p, 1e-7, 1.0 - 1e-7)
            c = Tensor(labels, dtype=np.float64)
            one = Tensor(np.ones(3), dtype=np.float64)
            ll = ag.add(ag.mul(c, ag.log(p)), ag.mul(ag.sub(one, c), ag.log(ag.sub(one, p))))
            return ag.scale(ag.mean_all(ll), -1.0)

        rng_fixed = np.random.default_rng(7).standard_normal((3, 5))
        check_against_oracle(loss, w2, tol=1e-4)

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([3.0]), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            out = ag.sum_all(ag.mul(x, x))
        tape.backward(out)
        np.testing.assert_allclose(x.grad, [6.0])

    def test_frozen_parameter_receives_no_gradient(self):
        frozen = Parameter("w", Tensor(np.ones((2, 2)), dtype=np.float64), trainable=False)
        live = Tensor(np.ones((2, 2)), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            out = ag.sum_all(ag.matmul(frozen.tensor, live))
        tape.backward(out)
        assert frozen.tensor.grad is None
        assert live.grad is not None


class TestFiniteDiffOracle:
    def test_quadratic_at_three(self):
        g = finite_diff_grad(lambda t: ag.sum_all(ag.mul(t, t)), Tensor(np.array([3.0]), dtype=np.float64))
        assert g.data[0] == pytest.approx(6.0, abs=1e-6)

    def test_sum_gives_ones(self, rng):
        g = finite_diff_grad(ag.sum_all, rand64(rng, 2, 3))
        np.testing.assert_allclose(g.data, 1.0, atol=1e-9)

    def test_non_finite_evaluation_raises(self):
        with pytest.raises(OracleError):
            finite_diff_grad(lambda t: float("nan"), Tensor(np.ones(2), dtype=np.float64))

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ContractError):
            finite_diff_grad(ag.sum_all, Tensor(np.ones(2)), h=0.0)


OP_CASES = [
    ("add", lambda t, w: ag.sum_all(ag.mul(ag.add(t, t), w)), 1e-4),
    ("sub", lambda t, w: ag.sum_all(ag.mul(ag.sub(ag.scale(t, 2.0), t), w)), 1e-4),
    ("mul", lambda t, w: ag.sum_all(ag.mul(ag.mul(t, t), w)), 1e-4),
    ("scale", lambda t, w: ag.sum_all(ag.mul(ag.scale(t, -1.7), w)), 1e-4),
    ("gelu", lambda t, w: ag.sum_all(ag.mul(ag.gelu(t), w)), 1e-4),
    ("sigmoid", lambda t, w: ag.sum_all(ag.mul(ag.sigmoid(t), w)), 1e-4),
    ("relu", lambda t, w: ag.sum_all(ag.mul(ag.relu(t), w)), 1e-4),
    ("softmax", lambda t, w: ag.sum_all(ag.mul(ag.softmax_rows(t), w)), 1e-4),
    ("mean_all", lambda t, w: ag.mean_all(ag.mul(t, w)), 1e-4),
    ("sum_last", lambda t, w: ag.sum_all(ag.mul(ag.sum_last(t), ag.sum_last(w))), 1e-4),
]


class TestOracleInvariant:
    """Every differentiable op agrees with the oracle on >= 20 random tensors."""

    @pytest.mark.parametrize("name,fn,tol", OP_CASES, ids=[c[0] for c in OP_CASES])
    def test_reverse_mode_matches_oracle(self, name, fn, tol):
        rng = np.random.default_rng(99)
        for trial in range(20):
            shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5)))
            x = Tensor(rng.standard_normal(shape) * 0.8 + 0.1, dtype=np.float64)
            w = Tensor(rng.standard_normal(shape), dtype=np.float64)
            check_against_oracle(lambda t: fn(t, w), x, tol=tol)


class TestNumericGuards:
    def test_log_of_zero_raises(self):
        with pytest.raises(NumericError):
            ag.log(Tensor(np.zeros(2)))

    def test_sqrt_of_negative_raises(self):
        with pytest.raises(NumericError):
            ag.sqrt(Tensor(np.array([-1.0])))

    def test_overflowing_mul_raises(self):
        big = Tensor(np.full(2, 1e38, dtype=np.float32))
        with pytest.raises(NumericError):
            ag.mul(big, big)


class TestDeterminism:
    def test_identical_inputs_give_bit_identical_outputs(self):
        def run():
            rng = np.random.default_rng(42)
            a = Tensor(rng.standard_normal((8, 8)), dtype=np.float64)
            b = Tensor(rng.standard_normal((8, 8)), dtype=np.float64)
            out = ag.softmax_rows(ag.matmul(ag.gelu(a), b))
            return out.data.tobytes()

        assert run() == run()


class TestTensorBasics:
    def test_shape_data_consistency(self):
        t = Tensor(np.arange(12.0).reshape(3, 4))
        assert t.size == 12 and t.shape == (3, 4)

    def test_item_on_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            Tensor(np.ones(3)).item()

    def test_detach_breaks_tape_participation(self):
        x = Tensor(np.ones(3), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            y = ag.scale(x, 2.0).detach()
            out = ag.sum_all(ag.mul(y, x))
        tape.backward(out)
        np.testing.assert_allclose(x.grad, 2.0)

    def test_operator_sugar_matches_functions(self, rng):
        a = rand64(rng, 2, 2)
        b = rand64(rng, 2, 2)
        np.testing.assert_array_equal((a + b).data, ag.add(a, b).data)
        np.testing.assert_array_equal((a - b).data, ag.sub(a, b).data)
        np.testing.assert_array_equal((a * 2.0).data, ag.scale(a, 2.0).data)
        np.testing.assert_array_equal((a @ b).data, ag.matmul(a, b).data)
