import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from declforge import nnkit as nn
from declforge.errors import ConfigError, NonFiniteError, UsageError
from declforge.nnkit import Dense, Gru, Param, RMSprop, Tape, Var


def dot_oracle(w, x, b):
    """Output of a dense layer via explicit Python loops."""
    out = []
    for i in range(len(w)):
        acc = 0.0
        for j in range(len(x)):
            acc += float(w[i][j]) * float(x[j])
        out.append(acc + float(b[i]))
    return np.array(out)


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def gru_oracle(w, u, b, x, h):
    """One GRU step computed unit by unit with scalar arithmetic."""
    d = len(h)
    w, u, b = np.asarray(w, np.float64), np.asarray(u, np.float64), np.asarray(b, np.float64)

    def pre(gate, i, vec_h):
        row = gate * d + i
        s = b[row]
        for j in range(len(x)):
            s += w[row, j] * x[j]
        for j in range(d):
            s += u[row, j] * vec_h[j]
        return s

    z = [sig(pre(0, i, h)) for i in range(d)]
    r = [sig(pre(1, i, h)) for i in range(d)]
    rh = [r[i] * h[i] for i in range(d)]
    hc = [math.tanh(pre(2, i, rh)) for i in range(d)]
    return np.array([(1 - z[i]) * h[i] + z[i] * hc[i] for i in range(d)])


def zero_gru(in_dim, hidden):
    g = Gru("g", in_dim, hidden, np.random.default_rng(0))
    for p in g.params():
        p.value[...] = 0
    return g


# --- linear -----------------------------------------------------------------


def test_linear_zero_weights_returns_bias():
    w = Param("w", np.zeros((2, 3)))
    b = Param("b", [0.3, -0.2])
    out = nn.linear(nn.const([5.0, -1.0, 2.0]), w, b)
    np.testing.assert_allclose(out.value, [0.3, -0.2], atol=1e-7)


def test_linear_identity():
    w = Param("w", np.eye(3))
    b = Param("b", np.zeros(3))
    out = nn.linear(nn.const([1.0, 2.0, 3.0]), w, b)
    np.testing.assert_array_equal(out.value, [1.0, 2.0, 3.0])


@pytest.mark.parametrize("seed", range(5))
def test_linear_matches_dot_oracle(seed):
    rng = np.random.default_rng(seed)
    layer = Dense("l", 3, 4, rng)
    x = rng.normal(size=3).astype(np.float32)
    out = layer(nn.const(x))
    np.testing.assert_allclose(out.value, dot_oracle(layer.w.value, x, layer.b.value), atol=1e-6)


def test_linear_batched_rows_match_single_rows():
    rng = np.random.default_rng(1)
    layer = Dense("l", 5, 3, rng)
    x = rng.normal(size=(2, 4, 5)).astype(np.float32)
    out = layer(nn.const(x)).value
    for i in range(2):
        for j in range(4):
            np.testing.assert_allclose(out[i, j], dot_oracle(layer.w.value, x[i, j], layer.b.value), atol=1e-5)


def test_linear_shape_mismatch():
    layer = Dense("l", 3, 2, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        layer(nn.const(np.ones(4)))


# --- GRU --------------------------------------------------------------------


def test_gru_zero_params_halves_state():
    g = zero_gru(3, 2)
    h = g.step(nn.const(np.ones(3)), nn.const([0.4, -0.8]))
    np.testing.assert_allclose(h.value, [0.2, -0.4], atol=1e-7)


def test_gru_zero_state_is_fixed_point_of_zero_params():
    g = zero_gru(4, 3)
    h = g.step(nn.const([1.0, -2.0, 3.0, 0.5]), nn.const(np.zeros(3)))
    np.testing.assert_array_equal(h.value, 0)


@pytest.mark.parametrize("seed", range(5))
def test_gru_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    g = Gru("g", 4, 3, rng)
    x = rng.normal(size=4).astype(np.float32)
    h = rng.uniform(-1, 1, size=3).astype(np.float32)
    got = g.step(nn.const(x), nn.const(h)).value
    want = gru_oracle(g.w.value, g.u.value, g.b.value, x.astype(np.float64), h.astype(np.float64))
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_gru_sequence_equals_repeated_steps():
    rng = np.random.default_rng(3)
    g = Gru("g", 4, 5, rng)
    xs = rng.normal(size=(6, 2, 4)).astype(np.float32)
    h0 = np.zeros((2, 5), np.float32)
    seq = g.sequence(nn.const(xs), nn.const(h0)).value
    h = nn.const(h0)
    for t in range(6):
        h = g.step(nn.const(xs[t]), h)
        np.testing.assert_allclose(seq[t], h.value, atol=1e-6)


def test_gru_width_mismatch():
    g = Gru("g", 4, 3, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        g.step(nn.const(np.ones(5)), nn.const(np.zeros(3)))
    with pytest.raises(ConfigError):
        g.step(nn.const(np.ones(4)), nn.const(np.zeros(2)))


# --- backward ---------------------------------------------------------------


def test_backward_linear_case():
    w = Param("w", [3.0])
    tape = Tape()
    loss = nn.sum_(nn.mul(w, nn.const([2.0]), tape), tape=tape)
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, [2.0])


def test_backward_chain_rule():
    a = Param("a", [1.0])
    b = Param("b", [2.0])
    tape = Tape()
    loss = nn.sum_(nn.square(nn.add(a, b, tape), tape), tape=tape)
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, [6.0])
    np.testing.assert_allclose(b.grad, [6.0])


def test_backward_without_forward_is_usage_error():
    with pytest.raises(UsageError):
        Tape().backward(nn.const(1.0))


def test_tape_is_consumed():
    w = Param("w", [1.0])
    tape = Tape()
    loss = nn.sum_(nn.mul(w, nn.const([2.0]), tape), tape=tape)
    tape.backward(loss)
    with pytest.raises(UsageError):
        tape.backward(loss)


def test_gradients_accumulate_until_zeroed():
    w = Param("w", [1.5])
    for expected in (4.0, 8.0):
        tape = Tape()
        loss = nn.sum_(nn.mul(w, nn.const([4.0]), tape), tape=tape)
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, [expected])
    w.zero_grad()
    np.testing.assert_array_equal(w.grad, [0.0])


def two_layer(seed, in_dim=4, hidden=6):
    rng = np.random.default_rng(seed)
    l1 = Dense("l1", in_dim, hidden, rng)
    l2 = Dense("l2", hidden, 1, rng)
    x = rng.normal(size=(3, in_dim))

    def loss_fn(tape):
        h = nn.tanh(l1(nn.const(x, dtype=l1.w.value.dtype), tape), tape)
        return nn.sum_(nn.square(l2(h, tape), tape), tape=tape)

    return loss_fn, l1.params() + l2.params()


@pytest.mark.parametrize("seed", range(3))
def test_two_layer_grads_match_finite_differences(seed):
    loss_fn, params = two_layer(seed)
    assert nn.finite_diff_check(loss_fn, params, eps=1e-3) < 1e-3


def test_finite_diff_linear_net_is_exact():
    rng = np.random.default_rng(0)
    layer = Dense("l", 3, 2, rng)
    x = rng.normal(size=(4, 3))

    def loss_fn(tape):
        return nn.sum_(layer(nn.const(x, dtype=np.float64), tape), tape=tape)

    assert nn.finite_diff_check(loss_fn, layer.params()) < 1e-5


def test_finite_diff_gru_mlp_stack():
    rng = np.random.default_rng(5)
    g = Gru("g", 3, 4, rng)
    head = Dense("h", 4, 2, rng)
    xs = rng.normal(size=(5, 2, 3))
    params = g.params() + head.params()
    assert sum(p.value.size for p in params) <= 1000

    def loss_fn(tape):
        dt = g.w.value.dtype
        hs = g.sequence(nn.const(xs, dtype=dt), nn.const(np.zeros((2, 4)), dtype=dt), tape)
        return nn.sum_(nn.square(head(nn.relu(hs, tape), tape), tape), tape=tape)

    assert nn.finite_diff_check(loss_fn, params) < 1e-3


def test_finite_diff_catches_corrupted_gradient():
    w = Param("w", [0.7, -1.2])

    def bad_square(x, tape):
        out = Var(x.value**2)

        def bwd():
            x._acc(out.grad * 3 * x.value)  # wrong factor

        return nn._track(tape, out, (x,), bwd)

    def loss_fn(tape):
        return nn.sum_(bad_square(w, tape), tape=tape)

    assert nn.finite_diff_check(loss_fn, [w]) > 1e-1


def test_finite_diff_rejects_bad_eps():
    loss_fn, params = two_layer(0)
    for eps in (1e-5, 1e-2, 0.5):
        with pytest.raises(UsageError):
            nn.finite_diff_check(loss_fn, params, eps=eps)


def test_finite_diff_restores_params():
    loss_fn, params = two_layer(1)
    before = [(p.value.copy(), p.value.dtype) for p in params]
    nn.finite_diff_check(loss_fn, params)
    for p, (v, dt) in zip(params, before):
        assert p.value.dtype == dt
        np.testing.assert_array_equal(p.value, v)


def test_finite_diff_reports_non_finite_with_name():
    w = Param("weird", [1.0])

    def loss_fn(tape):
        return nn.sum_(nn.mul(w, nn.const([np.inf]), tape), tape=tape)

    with pytest.raises(NonFiniteError):
        nn.finite_diff_check(loss_fn, [w])


@pytest.mark.parametrize(
    "op",
    [nn.relu, nn.sigmoid, nn.tanh, nn.abs_, nn.square],
)
def test_elementwise_grads(op):
    x = Param("x", np.random.default_rng(2).normal(size=(3, 4)) + 0.05)

    def loss_fn(tape):
        return nn.sum_(nn.mul(op(x, tape), nn.const(np.arange(12.0).reshape(3, 4), x.value.dtype), tape), tape=tape)

    assert nn.finite_diff_check(loss_fn, [x]) < 1e-4


def test_structural_op_grads():
    rng = np.random.default_rng(4)
    a = Param("a", rng.normal(size=(2, 3, 4)))
    b = Param("b", rng.normal(size=(2, 3, 4)))
    idx = np.array([[0, 3, 1], [2, 2, 0]])
    coef = rng.normal(size=(2, 3, 8))

    def loss_fn(tape):
        dt = a.value.dtype
        cat = nn.concat([a, b], axis=-1, tape=tape)
        picked = nn.take(a, idx, tape)
        st_ = nn.stack([nn.sum_(a, axis=-1, tape=tape), picked], axis=0, tape=tape)
        rows = nn.rows(b, (np.array([1, 0, 1]), np.array([2, 0, 2])), tape)
        mm = nn.matmul(nn.reshape(a, (6, 4), tape), nn.reshape(nn.rows(b, (np.array([0]), np.array([0])), tape), (4, 1), tape), tape)
        parts = [
            nn.sum_(nn.mul(cat, nn.const(coef, dt), tape), tape=tape),
            nn.sum_(nn.square(st_, tape), tape=tape),
            nn.sum_(nn.square(rows, tape), tape=tape),
            nn.sum_(nn.sub(mm, nn.const(1.0, dt), tape), tape=tape),
        ]
        total = parts[0]
        for p in parts[1:]:
            total = nn.add(total, p, tape)
        return total

    assert nn.finite_diff_check(loss_fn, [a, b]) < 1e-4


# --- optimizer --------------------------------------------------------------


def test_rmsprop_zero_grads_leave_params():
    p = Param("p", [1.0, -2.0])
    RMSprop([p]).step()
    np.testing.assert_array_equal(p.value, np.array([1.0, -2.0], np.float32))


def test_rmsprop_skips_frozen():
    p = Param("p", [1.0, -2.0])
    before = p.value.copy()
    p.frozen = True
    opt = RMSprop([p])
    p.grad[...] = [5.0, -3.0]
    opt.step()
    assert p.value.tobytes() == before.tobytes()
    np.testing.assert_array_equal(opt.square_avg[0], 0)


def test_rmsprop_scalar_recursion():
    p = Param("p", [0.5])
    lr, alpha, eps = 0.01, 0.99, 1e-5
    opt = RMSprop([p], lr=lr, alpha=alpha, eps=eps)
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    value, sq = 0.5, 0.0
    for g in grads:
        p.grad[...] = g
        opt.step()
        sq = alpha * sq + (1 - alpha) * g * g
        value = value - lr * g / (math.sqrt(sq) + eps)
        assert p.value[0] == pytest.approx(value, rel=1e-5)
        assert p.grad[0] == 0


def test_rmsprop_non_finite_grad_aborts_with_name():
    p = Param("layer.w", [1.0])
    p.grad[...] = np.nan
    with pytest.raises(NonFiniteError, match="layer.w"):
        RMSprop([p]).step()


def test_clip_grad_norm_scales_trainable_only():
    a = Param("a", [0.0, 0.0])
    b = Param("b", [0.0])
    a.grad[...] = [3.0, 4.0]
    b.grad[...] = [100.0]
    b.frozen = True
    norm = nn.clip_grad_norm([a, b], 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.8], rtol=1e-5)
    assert b.grad[0] == 100.0


def test_forward_is_deterministic():
    outs = []
    for _ in range(2):
        g = Gru("g", 3, 4, np.random.default_rng(9))
        x = np.random.default_rng(1).normal(size=(5, 3)).astype(np.float32)
        outs.append(g.sequence(nn.const(x[:, None]), nn.const(np.zeros((1, 4)))).value.tobytes())
    assert outs[0] == outs[1]


def test_param_rejects_empty_shape():
    with pytest.raises(ConfigError):
        Param("p", np.zeros((0, 3)))


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 10_000),
)
def test_broadcast_add_grads_reduce_to_input_shape(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = Param("a", rng.normal(size=(rows, cols)))
    b = Param("b", rng.normal(size=(cols,)))
    tape = Tape()
    loss = nn.sum_(nn.add(a, b, tape), tape=tape)
    tape.backward(loss)
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad, np.full(cols, rows))
