import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from declforge import nnkit as nn
from declforge.errors import ConfigError
from declforge.mixers import QmixMixer, VdnMixer, make_mixer, monotonicity_audit, qmix_mix, vdn_mix
from declforge.nnkit import Tape


def pairwise_sum(values):
    """Tree summation, independent of numpy's reduction order."""
    vals = [float(v) for v in values]
    while len(vals) > 1:
        nxt = [vals[i] + vals[i + 1] for i in range(0, len(vals) - 1, 2)]
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]


def test_vdn_example():
    assert vdn_mix([2.0, 3.0, -1.0]) == 4.0


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_vdn_single_agent_identity(x):
    assert vdn_mix([x]) == x


@pytest.mark.parametrize("seed", range(5))
def test_vdn_eight_agents_matches_pairwise(seed):
    q = np.random.default_rng(seed).normal(size=8)
    assert vdn_mix(q) == pytest.approx(pairwise_sum(q), abs=1e-6)


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=8), st.randoms())
def test_vdn_permutation_invariant(values, rnd):
    perm = list(values)
    rnd.shuffle(perm)
    assert vdn_mix(perm) == pytest.approx(vdn_mix(values), abs=1e-9)


def test_vdn_tracked_matches_plain():
    q = np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32)
    out = VdnMixer()(nn.const(q), None)
    np.testing.assert_allclose(out.value, q.sum(axis=-1), atol=1e-6)


def zero_qmix(n, s, h=32):
    mixer = QmixMixer("m", n, s, np.random.default_rng(0), hidden=h)
    for p in mixer.params():
        p.value[...] = 0
    return mixer


def test_qmix_zero_hypernets_ignore_q():
    mixer = QmixMixer("m", 3, 4, np.random.default_rng(0))
    for layer in (mixer.hyper_w1, mixer.hyper_w2):
        for p in layer.params():
            p.value[...] = 0
    state = np.random.default_rng(1).uniform(-1, 1, 4)
    values = [qmix_mix(mixer, q, state) for q in np.random.default_rng(2).normal(size=(10, 3)) * 10]
    np.testing.assert_allclose(values, values[0], atol=1e-6)


def test_qmix_hand_arithmetic():
    mixer = zero_qmix(1, 2, h=1)
    # w1 = |0.5*s0 - 1|, b1 = 0.2, w2 = |-2|, b2 = relu(s1 + 0.1) * 3 - 0.5
    mixer.hyper_w1.w.value[...] = [[0.5, 0.0]]
    mixer.hyper_w1.b.value[...] = [-1.0]
    mixer.hyper_b1.b.value[...] = [0.2]
    mixer.hyper_w2.b.value[...] = [-2.0]
    mixer.hyper_b2a.w.value[...] = [[0.0, 1.0]]
    mixer.hyper_b2a.b.value[...] = [0.1]
    mixer.hyper_b2b.w.value[...] = [[3.0]]
    mixer.hyper_b2b.b.value[...] = [-0.5]
    s = np.array([0.4, 0.3])
    q = 1.5
    w1 = abs(0.5 * 0.4 - 1.0)
    hidden = max(q * w1 + 0.2, 0.0)
    expected = hidden * 2.0 + max(0.3 + 0.1, 0.0) * 3.0 - 0.5
    assert qmix_mix(mixer, [q], s) == pytest.approx(expected, abs=1e-6)


def test_qmix_increase_never_decreases():
    rng = np.random.default_rng(0)
    mixer = QmixMixer("m", 3, 5, rng)
    for _ in range(1000):
        q = rng.normal(0, 5, 3)
        s = rng.uniform(-1, 1, 5)
        i = rng.integers(3)
        bumped = q.copy()
        bumped[i] += 1
        assert qmix_mix(mixer, bumped, s) >= qmix_mix(mixer, q, s) - 1e-6


def test_qmix_state_dim_mismatch():
    mixer = QmixMixer("m", 2, 4, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        qmix_mix(mixer, [1.0, 2.0], np.zeros(5))
    with pytest.raises(ConfigError):
        mixer(nn.const(np.zeros((3, 3))), nn.const(np.zeros((3, 4))))


def test_qmix_tracked_matches_numpy():
    rng = np.random.default_rng(1)
    mixer = QmixMixer("m", 3, 6, rng)
    q = rng.normal(size=(2, 5, 3)).astype(np.float32)
    s = rng.uniform(-1, 1, (2, 5, 6)).astype(np.float32)
    np.testing.assert_allclose(mixer(nn.const(q), nn.const(s)).value, mixer.forward_numpy(q, s), atol=1e-5)


def test_qmix_gradients():
    rng = np.random.default_rng(2)
    mixer = QmixMixer("m", 2, 3, rng, hidden=4)
    q = nn.Param("q", rng.normal(size=(5, 2)))
    s = rng.uniform(-1, 1, (5, 3))

    def loss_fn(tape):
        out = mixer(q, nn.const(s, q.value.dtype), tape)
        return nn.sum_(nn.square(out, tape), tape=tape)

    assert nn.finite_diff_check(loss_fn, mixer.params() + [q]) < 1e-3


def test_audit_fresh_mixer_is_clean():
    mixer = QmixMixer("m", 4, 6, np.random.default_rng(0))
    assert monotonicity_audit(mixer, 1000, np.random.default_rng(1)) <= 1e-6


def test_audit_negative_control():
    mixer = QmixMixer("m", 4, 6, np.random.default_rng(0), monotonic=False)
    assert monotonicity_audit(mixer, 1000, np.random.default_rng(1)) > 1e-3


def test_audit_needs_samples():
    with pytest.raises(ConfigError):
        monotonicity_audit(QmixMixer("m", 2, 2, np.random.default_rng(0)), 0, np.random.default_rng(0))


def test_make_mixer_kinds():
    rng = np.random.default_rng(0)
    assert make_mixer("vdn", "m", 2, 3, rng).kind == "vdn"
    assert make_mixer("qmix", "m", 2, 3, rng).kind == "qmix"
    with pytest.raises(ConfigError):
        make_mixer("qtran", "m", 2, 3, rng)


def joint_argmax_holds(mix, q, state):
    """Per-agent greedy actions attain the max team value over all joint actions."""
    n, k = q.shape
    greedy = q.argmax(axis=1)
    greedy_value = mix(q[np.arange(n), greedy], state)
    best = max(mix(q[np.arange(n), list(joint)], state) for joint in itertools.product(range(k), repeat=n))
    return greedy_value >= best - 1e-6


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), k=st.integers(2, 5), seed=st.integers(0, 10_000))
def test_argmax_consistency(n, k, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(0, 3, (n, k))
    state = rng.uniform(-1, 1, 4)
    mixer = QmixMixer("m", n, 4, rng)
    assert joint_argmax_holds(lambda c, s: vdn_mix(c), q, state)
    assert joint_argmax_holds(lambda c, s: qmix_mix(mixer, c, s), q, state)


def test_qmix_batched_over_time():
    rng = np.random.default_rng(3)
    mixer = QmixMixer("m", 2, 3, rng)
    q = rng.normal(size=(7, 2))
    s = rng.uniform(-1, 1, (7, 3))
    batched = mixer.forward_numpy(q, s)
    single = [qmix_mix(mixer, q[i], s[i]) for i in range(7)]
    np.testing.assert_allclose(batched, single, atol=1e-6)
