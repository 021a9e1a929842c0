import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from advrepair import numcore as nc
from advrepair.numcore import Tensor


def grad_of(f, *tensors):
    for t in tensors:
        t.zero_grad()
    with nc.Tape() as tape:
        out = f()
    nc.backward(out, tape)
    return [t.grad.copy() for t in tensors]


class TestMatmul:
    def test_identity(self):
        out = nc.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.values, [[3, 4], [5, 6]])

    def test_hand_product(self):
        assert nc.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).values.tolist() == [[11.0]]

    def test_zero(self):
        out = nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).normal(size=(3, 4))))
        np.testing.assert_array_equal(out.values, np.zeros((2, 4)))

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(nc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_backward_rule(self):
        rng = np.random.default_rng(1)
        A = nc.parameter(rng.normal(size=(2, 3)))
        B = nc.parameter(rng.normal(size=(3, 4)))
        gA, gB = grad_of(lambda: nc.sum(nc.matmul(A, B)), A, B)
        dC = np.ones((2, 4))
        np.testing.assert_allclose(gA, dC @ B.values.T)
        np.testing.assert_allclose(gB, A.values.T @ dC)


class TestActivations:
    def test_fixed_points(self):
        assert nc.sigmoid(Tensor(0.0)).item() == 0.5
        assert nc.tanh(Tensor(0.0)).item() == 0.0
        assert nc.activation(Tensor(math.log(3)), "sigmoid").item() == pytest.approx(0.75, abs=1e-15)

    def test_sigmoid_saturates_without_overflow(self):
        with np.errstate(over="raise"):
            y = nc.sigmoid(Tensor([-1000.0, 1000.0])).values
        assert y.tolist() == [0.0, 1.0]

    @given(hnp.arrays(np.float64, 5, elements=st.floats(-50, 50)))
    def test_ranges(self, x):
        s = nc.sigmoid(Tensor(x)).values
        t = nc.tanh(Tensor(x)).values
        assert np.all((s >= 0) & (s <= 1)) and np.all(np.abs(t) <= 1)
        assert np.all(np.isfinite(s))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nc.softmax(Tensor(np.zeros(4))).values, [0.25] * 4)

    def test_hand_value(self):
        np.testing.assert_allclose(nc.softmax(Tensor([0.0, math.log(3)])).values, [0.25, 0.75], atol=1e-15)

    @settings(max_examples=50)
    @given(
        hnp.arrays(np.float64, (3, 6), elements=st.floats(-30, 30)),
        st.floats(-100, 100),
    )
    def test_shift_invariance_and_normalisation(self, x, c):
        a = nc.softmax(Tensor(x), axis=1).values
        b = nc.softmax(Tensor(x + c), axis=1).values
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)

    def test_large_logits_finite(self):
        assert np.all(np.isfinite(nc.softmax(Tensor([1e4, 0.0, -1e4])).values))


class TestLosses:
    def test_bce_half(self):
        for label in (0, 1):
            assert nc.bce(Tensor([0.5]), [label]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_cross_entropy_uniform(self):
        for target in (0, 7):
            val = nc.loss("cross_entropy", Tensor(np.zeros(10)), target).item()
            assert val == pytest.approx(math.log(10), abs=1e-12)

    def test_cross_entropy_saturated(self):
        logits = np.zeros(10)
        logits[3] = 30.0
        assert nc.cross_entropy(Tensor(logits), 3).item() < 1e-9

    def test_cross_entropy_bad_target(self):
        with pytest.raises(IndexError):
            nc.cross_entropy(Tensor(np.zeros((1, 4))), [4])

    def test_clamped_probabilities(self):
        assert nc.bce(Tensor([0.0]), [1]).item() == pytest.approx(-math.log(1e-12))
        assert math.isfinite(nc.bce(Tensor([1.0]), [0]).item())


class TestDropout:
    def test_identity_cases(self):
        x = Tensor(np.arange(6.0))
        rng = nc.make_rng(0)
        assert nc.dropout(x, 0.0, True, rng) is x
        assert nc.dropout(x, 0.7, False, rng) is x

    def test_rate_one_rejected(self):
        with pytest.raises(nc.ConfigError):
            nc.dropout(Tensor([1.0]), 1.0, True, nc.make_rng(0))

    def test_expectation_preserved(self):
        y = nc.dropout(Tensor(np.ones(10_000)), 0.5, True, nc.make_rng(123)).values
        assert abs(y.mean() - 1.0) < 3 * (1 / 100)
        assert set(np.unique(y)) <= {0.0, 2.0}

    def test_seeded_mask_is_reproducible(self):
        a = nc.dropout(Tensor(np.ones(100)), 0.3, True, nc.make_rng(5)).values
        b = nc.dropout(Tensor(np.ones(100)), 0.3, True, nc.make_rng(5)).values
        assert np.array_equal(a, b)


class TestBackward:
    def test_sum(self):
        x = nc.parameter(np.random.default_rng(0).normal(size=(3, 2)))
        (g,) = grad_of(lambda: nc.sum(x), x)
        np.testing.assert_array_equal(g, np.ones((3, 2)))

    def test_square(self):
        x = nc.parameter([1.0, -2.0, 3.5])
        (g,) = grad_of(lambda: nc.sum(x * x), x)
        np.testing.assert_array_equal(g, 2 * x.values)

    def test_accumulates(self):
        x = nc.parameter([1.0, 2.0])
        for _ in range(2):
            with nc.Tape() as tape:
                out = nc.sum(x * x)
            nc.backward(out, tape)
        np.testing.assert_array_equal(x.grad, 4 * x.values)

    def test_non_scalar_rejected(self):
        x = nc.parameter([1.0, 2.0])
        with nc.Tape() as tape:
            y = x * 2.0
        with pytest.raises(nc.ContractError):
            nc.backward(y, tape)

    def test_tape_records_in_execution_order(self):
        x = nc.parameter([1.0])
        with nc.Tape() as tape:
            a = x * 2.0
            b = nc.tanh(a)
            nc.sum(b)
        assert tape.nodes[0].output is a and tape.nodes[1].output is b
        assert tape.nodes[1].inputs[0] is a

    def test_no_recording_outside_tape(self):
        x = nc.parameter([1.0])
        assert not (x * 2.0).requires_grad

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(4, 3)))
        W1 = nc.parameter(rng.normal(size=(3, 5)))
        W2 = nc.parameter(rng.normal(size=(5, 4)))
        w3 = nc.parameter(rng.normal(size=(4,)))
        labels = np.array([1, 0, 1, 1])

        def f():
            h = nc.tanh(nc.matmul(x, W1))
            h = nc.tanh(nc.matmul(h, W2))
            return nc.bce(nc.sigmoid(nc.matmul(h, w3)), labels)

        errs = nc.check_gradients(f, {"W1": W1, "W2": W2, "w3": w3})
        assert max(errs.values()) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients(seed):
    """Every differentiable primitive against central differences."""
    rng = np.random.default_rng(seed)
    a = nc.parameter(rng.normal(size=(3, 4)))
    b = nc.parameter(rng.normal(size=(4, 2)))
    c = nc.parameter(rng.normal(size=(3, 4)))
    v = nc.parameter(rng.normal(size=(4,)))
    tgt = rng.integers(0, 4, size=3)
    mask = rng.random((3, 4)) > 0.3
    mask[:, 0] = True
    p = {"a": a, "b": b, "c": c, "v": v}
    cases = {
        "matmul": lambda: nc.sum(nc.tanh(nc.matmul(a, b))),
        "matvec": lambda: nc.sum(nc.tanh(nc.matmul(a, v))),
        "batched": lambda: nc.sum(nc.matmul(nc.reshape(a, (3, 1, 4)), nc.stack([b] * 3))),
        "add_sub_mul": lambda: nc.sum((a + c) * (a - v) * 0.5),
        "sigmoid": lambda: nc.sum(nc.sigmoid(a) * c),
        "tanh": lambda: nc.sum(nc.tanh(a) * c),
        "softmax": lambda: nc.sum(nc.softmax(a, axis=1) * c),
        "log_softmax": lambda: nc.sum(nc.log_softmax(a, axis=0) * c),
        "masked_softmax": lambda: nc.sum(nc.softmax(nc.masked_fill(a, ~mask, -np.inf), axis=1) * c),
        "cross_entropy": lambda: nc.cross_entropy(a, tgt, weights=[1.0, 0.0, 2.0]),
        "bce": lambda: nc.bce(nc.sigmoid(nc.matmul(a, v)), [1, 0, 1]),
        "concat_slice": lambda: nc.sum(nc.tanh(nc.concat([a, c], axis=1))[:, 2:7] * 1.5),
        "take_rows": lambda: nc.sum(nc.tanh(nc.take_rows(a, [[0, 2], [2, 2]]))),
        "where": lambda: nc.sum(nc.tanh(nc.where(mask, a, c))),
        "mean": lambda: nc.mean(nc.tanh(a) * v),
        "log": lambda: nc.sum(nc.log(nc.sigmoid(a))),
    }
    for name, f in cases.items():
        errs = nc.check_gradients(f, p)
        assert max(errs.values()) < 1e-4, (name, errs)


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = {"w": nc.parameter([1.0, -2.0])}
        state = nc.AdamState()
        nc.adam_step(p, state)
        assert p["w"].values.tolist() == [1.0, -2.0] and state.t == 1

    def test_first_step_is_sign_step(self):
        lr = 1e-3
        g = np.array([0.5, -3.0, 1e-2])
        p = {"w": nc.parameter(np.zeros(3))}
        p["w"].grad = g.copy()
        nc.adam_step(p, nc.AdamState(lr=lr))
        delta = p["w"].values
        assert np.all(np.abs(delta + lr * np.sign(g)) < lr * 1e-6)
        assert np.array_equal(p["w"].grad, np.zeros(3))

    def test_second_step_not_larger(self):
        lr = 1e-3
        g = np.array([0.5, -3.0, 2.0])
        p = {"w": nc.parameter(np.zeros(3))}
        state = nc.AdamState(lr=lr)
        p["w"].grad = g.copy()
        nc.adam_step(p, state)
        d1 = p["w"].values.copy()
        p["w"].grad = g.copy()
        nc.adam_step(p, state)
        d2 = p["w"].values - d1
        assert np.all(np.abs(d2) <= np.abs(d1) + lr * 1e-6)
        assert state.t == 2

    def test_shape_mismatch(self):
        p = {"w": nc.parameter(np.zeros(3))}
        with pytest.raises(nc.DimensionError):
            nc.adam_step(p, nc.AdamState(), grads={"w": np.zeros(2)})


def test_clip_bound():
    rng = np.random.default_rng(0)
    ps = [nc.parameter(np.zeros(4)), nc.parameter(np.zeros((2, 2)))]
    for p in ps:
        p.grad = rng.normal(size=p.shape) * 10
    nc.clip_grad_norm(ps, 5.0)
    assert nc.global_grad_norm(ps) <= 5.0 + 1e-9


def test_relative_error_floor():
    assert nc.relative_error(0.0, 0.0) == 0.0
    assert nc.relative_error(1.0, 1.0 + 1e-6) < 1e-6
