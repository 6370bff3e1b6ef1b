import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emit.numerics import (
    AdamState,
    NonDeterministicClosure,
    Parameter,
    Tape,
    Tensor,
    adam_step,
    default_dtype,
    grad_check,
)
from emit.numerics import functional as F
from emit.numerics.nn import Linear


def numeric_grad(fn, x, eps=1e-6):
    """Central differences of scalar ``fn`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = fn()
        flat[k] = orig - eps
        down = fn()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * eps)
    return g


def tape_grad(build, x):
    p = Parameter(x)
    with Tape() as tape:
        loss = build(p)
    tape.backward(loss)
    return p.grad


class TestForwardPrimitives:
    def test_softmax_equal_logits(self):
        np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_fixed_points(self):
        assert F.tanh(Tensor(0.0)).item() == 0.0
        assert F.sigmoid(Tensor(0.0)).item() == 0.5

    def test_identity_matmul(self):
        a = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(F.matmul(np.eye(3), a).data, a)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            F.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
            F.add(np.ones(2), np.ones(3))

    def test_sigmoid_is_stable_for_large_inputs(self):
        y = F.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_array_equal(y, [0.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.floats(-50, 50))
    def test_softmax_rows_sum_to_one(self, rows, cols, shift):
        x = np.random.default_rng(rows * 7 + cols).normal(size=(rows, cols)) * 10 + shift
        y = F.softmax(x).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)

    def test_layer_norm_standardises_rows(self):
        x = np.random.default_rng(1).normal(3.0, 5.0, size=(20, 16))
        y = F.layer_norm(x).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)

    def test_dropout_statistics(self):
        rng = np.random.default_rng(2)
        x = np.ones((200, 100))
        rate = 0.3
        y = F.dropout(x, rate, True, rng).data
        zero_frac = np.mean(y == 0)
        assert abs(zero_frac - rate) < 0.02
        np.testing.assert_allclose(y[y != 0], 1.0 / (1.0 - rate))

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.random.default_rng(3).normal(size=(4, 5)))
        assert F.dropout(x, 0.5, False) is x

    def test_masked_fill(self):
        out = F.masked_fill(np.arange(4.0), [True, False, True, False], -1e9).data
        np.testing.assert_array_equal(out, [-1e9, 1.0, -1e9, 3.0])


# each case: (builder of scalar loss from a parameter, input shape)
W = np.random.default_rng(10).normal(size=(4, 3))
B3 = np.random.default_rng(11).normal(size=(2, 5, 4))
ROWS = np.array([0, 2, 2])
CASES = {
    "matmul_batched": (lambda p: F.sum(F.tanh(F.matmul(p, W))), (2, 5, 4)),
    "matmul_weight": (lambda p: F.sum(F.tanh(F.matmul(B3, p))), (4, 3)),
    "bmm": (lambda p: F.sum(F.matmul(p, F.transpose(p, (0, 2, 1))) * 0.1), (2, 3, 4)),
    "broadcast_add_mul": (lambda p: F.sum((p + 1.0) * p * np.arange(3.0)), (4, 3)),
    "div": (lambda p: F.sum(F.div(1.0, p * p + 2.0)), (3, 2)),
    "softmax": (lambda p: F.sum(F.softmax(p) * np.arange(5.0)), (3, 5)),
    "layer_norm": (lambda p: F.sum(F.layer_norm(p) * np.linspace(-1, 1, 6)), (2, 6)),
    "sigmoid": (lambda p: F.sum(F.sigmoid(p) * 2.0), (3, 3)),
    "getitem_rows": (lambda p: F.sum(F.getitem(p, ROWS) * F.getitem(p, ROWS)), (4, 2)),
    "reshape_transpose": (lambda p: F.sum(F.tanh(p.reshape(2, 6).transpose(1, 0)) * np.arange(2.0)), (3, 4)),
    "mean_axis": (lambda p: F.sum(F.mean(p * p, axis=1)), (3, 4)),
    "concat": (lambda p: F.sum(F.tanh(F.concat([p, p * 2.0], axis=1))), (2, 3)),
    "where": (lambda p: F.sum(F.where(np.array([[True], [False]]), p * p, F.tanh(p))), (2, 3)),
    "masked_fill_softmax": (lambda p: F.sum(F.softmax(F.masked_fill(p, np.array([False, True, False]), -1e9)) * np.arange(3.0)), (2, 3)),
    "bce": (lambda p: F.bce_with_logits(p, np.array([1.0, 0.0, 1.0, 0.0])), (4,)),
    "relu": (lambda p: F.sum(F.relu(p) * np.arange(6.0)), (6,)),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_match_finite_differences(name):
    build, shape = CASES[name]
    x = np.random.default_rng(sorted(CASES).index(name)).normal(size=shape)
    if name == "relu":
        x = np.where(np.abs(x) < 0.1, 0.5, x)  # keep away from the kink
    analytic = tape_grad(build, x.copy())
    numeric = numeric_grad(lambda: build(Tensor(x)).item(), x)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


class TestBackward:
    def test_linear_map_gradient(self):
        x = np.array([1.0, -2.0, 3.0])
        W = Parameter(np.ones((2, 3)))
        with Tape() as tape:
            loss = F.sum(F.matmul(W, x.reshape(3, 1)))
        tape.backward(loss)
        np.testing.assert_array_equal(W.grad, np.tile(x, (2, 1)))

    def test_zero_gradient_at_minimum(self):
        a = Parameter(np.array([1.0, 2.0]))
        with Tape() as tape:
            d = a - np.array([1.0, 2.0])
            loss = F.mean(d * d)
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, 0.0)

    def test_non_scalar_loss_rejected(self):
        a = Parameter(np.ones(3))
        with Tape() as tape:
            y = a * 2.0
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)

    def test_repeated_backward_accumulates(self):
        a = Parameter(np.array([3.0]))
        with Tape() as tape:
            loss = F.sum(a * a)
        tape.backward(loss)
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [12.0])

    def test_sum_linearity(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 3))

        def l1(p):
            return F.sum(F.tanh(F.matmul(p, w)))

        def l2(p):
            return F.sum(F.softmax(p) * np.arange(3.0))

        x = rng.normal(size=(2, 3))
        g_sum = tape_grad(lambda p: l1(p) + l2(p), x)
        np.testing.assert_allclose(g_sum, tape_grad(l1, x) + tape_grad(l2, x), rtol=0, atol=1e-12)

    def test_no_tape_records_nothing(self):
        a = Parameter(np.ones(2))
        y = a * 3.0
        assert not y.requires_grad

    def test_detach_blocks_gradient(self):
        a = Parameter(np.array([2.0]))
        with Tape() as tape:
            loss = F.sum(a * a.detach())
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [2.0])

    def test_two_layer_tanh_network_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        l1, l2 = Linear(4, 6, rng), Linear(6, 1, rng)
        x = rng.normal(size=(5, 4))

        def loss():
            return F.mean(F.tanh(l2(F.tanh(l1(x)))))

        params = {"l1.w": l1.weight, "l1.b": l1.bias, "l2.w": l2.weight, "l2.b": l2.bias}
        assert grad_check(loss, params).max_rel_error < 1e-6


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Parameter(np.array([1.0, -2.0]))
        state = AdamState.init({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        adam_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_step_counter(self):
        p = Parameter(np.zeros(1))
        state = AdamState.init({"p": p})
        for k in range(3):
            p.grad = np.ones(1)
            adam_step({"p": p}, state)
            assert state.step == k + 1

    def test_first_step_closed_form(self):
        # m_hat = g, v_hat = g^2 after bias correction => step = lr * g / (|g| + eps)
        p = Parameter(np.zeros(1))
        state = AdamState.init({"p": p}, lr=0.1)
        p.grad = np.ones(1)
        adam_step({"p": p}, state)
        np.testing.assert_allclose(p.data, [-0.1 / (1.0 + 1e-8)], rtol=0, atol=1e-15)

    def test_weight_decay_is_decoupled(self):
        p = Parameter(np.array([2.0]))
        state = AdamState.init({"p": p}, lr=0.1, weight_decay=0.5)
        p.grad = np.zeros(1)
        adam_step({"p": p}, state)
        np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_uninitialised_state(self):
        p = Parameter(np.zeros(1))
        with pytest.raises(KeyError):
            adam_step({"p": p}, AdamState())

    def test_descends_a_quadratic(self):
        p = Parameter(np.array([3.0, -4.0]))
        state = AdamState.init({"p": p}, lr=0.05)
        for _ in range(500):
            p.grad = None
            with Tape() as tape:
                loss = F.sum(p * p)
            tape.backward(loss)
            adam_step({"p": p}, state)
        assert np.linalg.norm(p.data) < 1e-2


class TestGradCheck:
    def test_quadratic(self):
        p = Parameter(np.random.default_rng(6).normal(size=(3, 4)))
        # central differences are exact on a quadratic, so a wide step only removes roundoff
        result = grad_check(lambda: F.scale(F.sum(p * p), 0.5), {"p": p}, epsilon=1e-3)
        assert result.max_rel_error < 1e-9

    def test_detects_corrupted_backward_rule(self, monkeypatch):
        from emit.numerics.tensor import record

        def bad_tanh(a):
            a = a if isinstance(a, Tensor) else Tensor(a)
            y = np.tanh(a.data)
            return record(Tensor(y), (a,), lambda g: (2.0 * g * (1.0 - y * y),))

        monkeypatch.setattr(F, "tanh", bad_tanh)
        rng = np.random.default_rng(7)
        layer = Linear(3, 2, rng)
        x = rng.normal(size=(4, 3))
        result = grad_check(lambda: F.sum(F.tanh(layer(x))), {"w": layer.weight})
        assert result.max_rel_error > 1e-4

    def test_rejects_nondeterministic_closure(self):
        p = Parameter(np.arange(1.0, 51.0))
        rng = np.random.default_rng(8)
        with pytest.raises(NonDeterministicClosure):
            grad_check(lambda: F.sum(F.dropout(p, 0.5, True, rng)), {"p": p})

    def test_requires_float64(self):
        with default_dtype(np.float32):
            p = Parameter(np.ones(2))
        with pytest.raises(TypeError):
            grad_check(lambda: F.sum(p), {"p": p})
