"""Reverse-mode gradients vs central finite differences, plus tape semantics."""

import numpy as np
import pytest

from voicecond.autodiff import LstmParams, Tape, Tensor, constant, forward_op
from voicecond.errors import ShapeError

from gradcheck import assert_grads_close, numeric_gradient

SEEDS = range(5)


def _weighted_sum(tape, out, rng):
    """Scalar loss with a fixed random weight per output element."""
    if out.data.shape == ():
        return out
    w = constant(rng.standard_normal(out.data.shape))
    return tape.sum(tape.mul(out, w))


# One entry per op: name -> (input shapes, forward builder).
OP_CASES = {
    "matmul_2d2d": ([(3, 4), (4, 5)], lambda t, a, b: t.matmul(a, b)),
    "matmul_1d2d": ([(4,), (4, 5)], lambda t, a, b: t.matmul(a, b)),
    "matmul_2d1d": ([(3, 4), (4,)], lambda t, a, b: t.matmul(a, b)),
    "matmul_1d1d": ([(4,), (4,)], lambda t, a, b: t.matmul(a, b)),
    "add": ([(3, 4), (3, 4)], lambda t, a, b: t.add(a, b)),
    "add_bias": ([(3, 4), (4,)], lambda t, a, b: t.add_bias(a, b)),
    "mul": ([(2, 5), (2, 5)], lambda t, a, b: t.mul(a, b)),
    "scale": ([(3, 3)], lambda t, a: t.scale(a, -1.7)),
    "concat_rows": ([(2, 4), (3, 4)], lambda t, a, b: t.concat([a, b], axis=0)),
    "concat_cols": ([(3, 2), (3, 4)], lambda t, a, b: t.concat([a, b], axis=1)),
    "slice": ([(4, 6)], lambda t, a: t.slice(a, 1, 2, 5)),
    "take_row": ([(5, 3)], lambda t, a: t.take_row(a, 2)),
    "take_index": ([(7,)], lambda t, a: t.take_index(a, 4)),
    "tile_rows": ([(4,)], lambda t, a: t.tile_rows(a, 3)),
    "tanh": ([(3, 4)], lambda t, a: t.tanh(a)),
    "sigmoid": ([(3, 4)], lambda t, a: t.sigmoid(a)),
    "softmax": ([(3, 5)], lambda t, a: t.softmax(a, axis=-1)),
    "log_softmax": ([(3, 5)], lambda t, a: t.log_softmax(a, axis=-1)),
    "sum": ([(3, 4)], lambda t, a: t.sum(a)),
    "mean": ([(3, 4)], lambda t, a: t.mean(a)),
    "conv_narrow": ([(9,), (3, 4)], lambda t, a, b: t.conv1d_same(a, b)),
    "conv_wide": ([(5,), (2, 11)], lambda t, a, b: t.conv1d_same(a, b)),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name, seed):
    shapes, build = OP_CASES[name]
    rng = np.random.default_rng(1000 + seed)
    tensors = [Tensor(rng.standard_normal(s)) for s in shapes]

    tape = Tape()
    loss = _weighted_sum(tape, build(tape, *tensors), np.random.default_rng(2000 + seed))
    tape.backward(loss)
    analytic = [x.grad.copy() for x in tensors]

    def forward():
        t = Tape(record=False)
        return float(_weighted_sum(t, build(t, *tensors), np.random.default_rng(2000 + seed)).data)

    for x, g in zip(tensors, analytic):
        numeric = numeric_gradient(forward, x.data)
        assert_grads_close(g, numeric, context=f"{name} seed={seed}")


def test_gradients_accumulate_across_reuse():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((3, 3)))

    def build(tape):
        y = tape.tanh(x)
        return tape.sum(tape.add(tape.mul(y, y), tape.scale(x, 0.5)))

    tape = Tape()
    tape.backward(build(tape))
    numeric = numeric_gradient(lambda: float(build(Tape(record=False)).data), x.data)
    assert_grads_close(x.grad, numeric, context="reuse")


def test_constants_receive_no_gradient():
    x = Tensor(np.ones((2, 2)))
    c = constant(np.full((2, 2), 3.0))
    tape = Tape()
    loss = tape.sum(tape.mul(x, c))
    tape.backward(loss)
    assert c.grad is None
    assert np.allclose(x.grad, 3.0)


def test_backward_zero_fills_unreached_params():
    used = Tensor(np.ones(3))
    unused = Tensor(np.ones(4))
    tape = Tape()
    loss = tape.sum(used)
    tape.backward(loss, params=[used, unused])
    assert np.array_equal(unused.grad, np.zeros(4))
    assert np.array_equal(used.grad, np.ones(3))


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3))
    tape = Tape()
    y = tape.tanh(x)
    with pytest.raises(ShapeError, match="scalar"):
        tape.backward(y)


def test_backward_rejected_on_non_recording_tape():
    x = Tensor(np.ones(()))
    tape = Tape(record=False)
    y = tape.tanh(x)
    with pytest.raises(ValueError):
        tape.backward(y)


@pytest.mark.parametrize(
    "op",
    [
        lambda t: t.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))),
        lambda t: t.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))),
        lambda t: t.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2)))),
        lambda t: t.add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(4))),
    ],
)
def test_shape_mismatch_reports_both_shapes(op):
    with pytest.raises(ShapeError) as exc:
        op(Tape())
    msg = str(exc.value)
    assert msg.count("(") >= 2, msg


def test_slice_out_of_range_rejected():
    with pytest.raises(ShapeError):
        Tape().slice(Tensor(np.ones((3, 3))), 0, 1, 5)


def test_forward_op_dispatch_and_unknown_kind():
    tape = Tape()
    a = Tensor(np.ones((2, 2)))
    out = forward_op(tape, "scale", a, c=2.0)
    assert np.allclose(out.data, 2.0)
    with pytest.raises(ValueError):
        forward_op(tape, "div", a)


def test_forward_is_deterministic_bitwise():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((4, 4)))
    w = Tensor(rng.standard_normal((4, 4)))

    def run():
        t = Tape()
        out = t.softmax(t.tanh(t.matmul(x, w)), axis=-1)
        loss = t.sum(out)
        t.backward(loss)
        return out.data.tobytes(), x.grad.tobytes()

    x.zero_grad(), w.zero_grad()
    first = run()
    x.zero_grad(), w.zero_grad()
    second = run()
    assert first == second


def test_record_false_matches_recorded_forward():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((5, 3)))
    w = Tensor(rng.standard_normal((3, 2)))
    rec = Tape()
    out_rec = rec.tanh(rec.matmul(x, w))
    plain = Tape(record=False)
    out_plain = plain.tanh(plain.matmul(x, w))
    assert out_rec.data.tobytes() == out_plain.data.tobytes()
    assert plain._nodes == []


# -- LSTM ----------------------------------------------------------------------


def _random_lstm(rng, d, h):
    return LstmParams(
        w_x=Tensor(rng.standard_normal((d, 4 * h)) * 0.5),
        w_h=Tensor(rng.standard_normal((h, 4 * h)) * 0.5),
        b=Tensor(rng.standard_normal(4 * h) * 0.5),
    )


def test_lstm_step_zero_parameters_zero_state_gives_zero():
    d, h = 3, 4
    params = LstmParams(Tensor(np.zeros((d, 4 * h))), Tensor(np.zeros((h, 4 * h))), Tensor(np.zeros(4 * h)))
    tape = Tape()
    x = Tensor(np.random.default_rng(0).standard_normal(d))
    h1, c1 = tape.lstm_step(params, x, (Tensor(np.zeros(h)), Tensor(np.zeros(h))))
    assert np.allclose(h1.data, 0.0)
    assert np.allclose(c1.data, 0.0)


def test_lstm_step_saturated_forget_gate_preserves_cell():
    d, h = 2, 5
    b = np.zeros(4 * h)
    b[h : 2 * h] = 30.0  # forget gate pinned open
    b[:h] = -30.0  # input gate pinned shut
    params = LstmParams(Tensor(np.zeros((d, 4 * h))), Tensor(np.zeros((h, 4 * h))), Tensor(b))
    rng = np.random.default_rng(5)
    c0 = rng.standard_normal(h)
    tape = Tape()
    _, c1 = tape.lstm_step(params, Tensor(rng.standard_normal(d)), (Tensor(np.zeros(h)), Tensor(c0)))
    assert np.max(np.abs(c1.data - c0)) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_step_three_step_unroll_gradcheck(seed):
    d, h, steps = 3, 4, 3
    rng = np.random.default_rng(300 + seed)
    params = _random_lstm(rng, d, h)
    xs = [Tensor(rng.standard_normal(d)) for _ in range(steps)]
    h0 = Tensor(rng.standard_normal(h) * 0.1)
    c0 = Tensor(rng.standard_normal(h) * 0.1)
    w = constant(rng.standard_normal(h))
    leaves = [params.w_x, params.w_h, params.b, h0, c0] + xs

    def build(tape):
        state = (h0, c0)
        for x in xs:
            state = tape.lstm_step(params, x, state)
        return tape.sum(tape.mul(state[0], w))

    tape = Tape()
    tape.backward(build(tape))
    analytic = [t.grad.copy() for t in leaves]
    for t, g in zip(leaves, analytic):
        numeric = numeric_gradient(lambda: float(build(Tape(record=False)).data), t.data)
        assert_grads_close(g, numeric, context=f"lstm_step unroll seed={seed}")


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_sequence_matches_stepwise_composition(reverse):
    d, h, T = 3, 4, 6
    rng = np.random.default_rng(42)
    params = _random_lstm(rng, d, h)
    xs = rng.standard_normal((T, d))

    tape = Tape(record=False)
    zx = tape.add_bias(tape.matmul(constant(xs), params.w_x), params.b)
    fused = tape.lstm_sequence(zx, params.w_h, reverse=reverse).data

    state = (Tensor(np.zeros(h)), Tensor(np.zeros(h)))
    order = range(T - 1, -1, -1) if reverse else range(T)
    stepped = np.zeros((T, h))
    for t in order:
        state = tape.lstm_step(params, constant(xs[t]), state)
        stepped[t] = state[0].data
    assert np.max(np.abs(fused - stepped)) < 1e-12


@pytest.mark.parametrize("reverse", [False, True])
@pytest.mark.parametrize("seed", [0, 1])
def test_lstm_sequence_gradcheck(reverse, seed):
    h, T = 3, 5
    rng = np.random.default_rng(900 + seed)
    zx = Tensor(rng.standard_normal((T, 4 * h)) * 0.7)
    w_h = Tensor(rng.standard_normal((h, 4 * h)) * 0.7)
    w = constant(rng.standard_normal((T, h)))

    def build(tape):
        return tape.sum(tape.mul(tape.lstm_sequence(zx, w_h, reverse=reverse), w))

    tape = Tape()
    tape.backward(build(tape))
    for t in (zx, w_h):
        numeric = numeric_gradient(lambda: float(build(Tape(record=False)).data), t.data)
        assert_grads_close(t.grad, numeric, context=f"lstm_sequence reverse={reverse}")
