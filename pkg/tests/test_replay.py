import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from declforge.errors import UsageError
from declforge.replay import Episode, NotReady, ReplayBuffer, pad_batch, push_episode, sample_batch

N, OBS, SD, K = 2, 3, 4, 5


def fake_episode(length, tag=0.0, task="t", win=False):
    rng = np.random.default_rng(int(tag * 1000) + length)
    term = np.zeros(length, bool)
    term[-1] = True
    return Episode(
        task_id=task,
        obs=rng.normal(size=(length + 1, N, OBS)).astype(np.float32) + tag,
        state=rng.normal(size=(length + 1, SD)).astype(np.float32),
        avail=rng.random((length + 1, N, K)) > 0.3,
        actions=rng.integers(0, K, (length, N)),
        reward=np.full(length, -0.01, np.float32),
        terminated=term,
        win=win,
    )


def test_push_then_sample_one():
    buf = ReplayBuffer("t")
    ep = fake_episode(4)
    push_episode(buf, ep)
    batch = sample_batch(buf, 1, np.random.default_rng(0))
    np.testing.assert_array_equal(batch.obs[0], ep.obs)
    np.testing.assert_array_equal(batch.actions[0], ep.actions)


def test_fifo_eviction():
    buf = ReplayBuffer("t", capacity=3)
    eps = [fake_episode(2, tag=i) for i in range(4)]
    for e in eps:
        buf.push(e)
    assert len(buf) == 3
    assert all(e is not eps[0] for e in buf.episodes)
    assert buf.episodes[0] is eps[1]


def test_default_capacity():
    assert ReplayBuffer("t").capacity == 5000


def test_store_is_untransformed():
    buf = ReplayBuffer("t")
    ep = fake_episode(5)
    copy = {k: np.copy(getattr(ep, k)) for k in ("obs", "state", "avail", "actions", "reward", "terminated")}
    buf.push(ep)
    stored = buf.episodes[0]
    for k, v in copy.items():
        assert getattr(stored, k).tobytes() == v.tobytes()


def test_task_mismatch():
    with pytest.raises(UsageError):
        ReplayBuffer("a").push(fake_episode(2, task="b"))


def test_single_episode_fills_batch_with_copies():
    buf = ReplayBuffer("t")
    ep = fake_episode(3)
    buf.push(ep)
    batch = buf.sample(3, np.random.default_rng(0))
    for i in range(3):
        np.testing.assert_array_equal(batch.obs[i], ep.obs)


def test_empty_buffer_not_ready():
    buf = ReplayBuffer("t")
    assert not buf.ready(1)
    with pytest.raises(NotReady):
        buf.sample(1, np.random.default_rng(0))


def test_ready_needs_batch_size_episodes():
    buf = ReplayBuffer("t")
    for i in range(3):
        buf.push(fake_episode(2, tag=i))
    assert buf.ready(3) and not buf.ready(4)


def test_padding_contents():
    short, long = fake_episode(2, 1.0), fake_episode(5, 2.0)
    batch = pad_batch([short, long])
    assert batch.max_len == 5
    assert batch.obs.shape == (2, 6, N, OBS)
    np.testing.assert_array_equal(batch.filled[0], [1, 1, 0, 0, 0])
    np.testing.assert_array_equal(batch.filled[1], [1, 1, 1, 1, 1])
    np.testing.assert_array_equal(batch.reward[0, 2:], 0)
    np.testing.assert_array_equal(batch.actions[0, 2:], 0)
    assert batch.terminated[0, 2:].all()
    for t in range(3, 6):
        np.testing.assert_array_equal(batch.obs[0, t], short.obs[-1])
        np.testing.assert_array_equal(batch.state[0, t], short.state[-1])


def test_pad_batch_rejects_short_max_len():
    with pytest.raises(UsageError):
        pad_batch([fake_episode(4)], max_len=3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=6), st.integers(0, 5))
def test_fill_mask_is_prefix_with_lengths(lengths, extra):
    eps = [fake_episode(n, tag=i) for i, n in enumerate(lengths)]
    batch = pad_batch(eps, max_len=max(lengths) + extra)
    assert batch.filled.sum() == sum(lengths)
    for row, n in zip(batch.filled, lengths):
        assert row[:n].all() and not row[n:].any()


def test_uniform_sampling_binomial_bound():
    buf = ReplayBuffer("t")
    eps = [fake_episode(2, tag=i) for i in range(4)]
    for e in eps:
        buf.push(e)
    rng = np.random.default_rng(0)
    draws = np.concatenate([buf.sample_indices(100, rng) for _ in range(100)])
    counts = np.bincount(draws, minlength=4)
    n = len(draws)
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) <= 3 * sigma)


def test_sampling_deterministic_given_seed():
    buf = ReplayBuffer("t")
    for i in range(10):
        buf.push(fake_episode(3, tag=i))
    a = buf.sample(5, np.random.default_rng(7))
    b = buf.sample(5, np.random.default_rng(7))
    assert a.obs.tobytes() == b.obs.tobytes()


def test_episode_return():
    ep = fake_episode(4)
    ep.reward[-1] = 9.99
    assert ep.episode_return == pytest.approx(-0.03 + 9.99)
