"""Per-task episodic replay: whole trajectories, padded into batches for recurrent training."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass
class Episode:
    """One trajectory of length ``L``.

    Per-step arrays (``actions``, ``reward``, ``terminated``) have ``L`` rows.
    ``obs``, ``state`` and ``avail`` have ``L + 1`` rows: the extra row is what
    the agents observe after the final step.
    """

    task_id: str
    obs: np.ndarray  # [L+1, N, obs_dim]
    state: np.ndarray  # [L+1, state_dim]
    avail: np.ndarray  # [L+1, N, K] bool
    actions: np.ndarray  # [L, N] int
    reward: np.ndarray  # [L] float32
    terminated: np.ndarray  # [L] bool
    win: bool = False

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.reward, dtype=np.float64))


@dataclass
class Batch:
    """``B`` episodes padded to the longest one.

    Padding repeats the last observation / state / mask, carries zero reward,
    action 0 and ``terminated=True``, and is ``False`` in ``filled``.
    """

    task_id: str
    obs: np.ndarray  # [B, L_max+1, N, obs_dim]
    state: np.ndarray  # [B, L_max+1, state_dim]
    avail: np.ndarray  # [B, L_max+1, N, K]
    actions: np.ndarray  # [B, L_max, N]
    reward: np.ndarray  # [B, L_max]
    terminated: np.ndarray  # [B, L_max]
    filled: np.ndarray  # [B, L_max] bool
    lengths: np.ndarray  # [B]

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def max_len(self) -> int:
        return self.actions.shape[1]


def pad_batch(episodes: list[Episode], max_len: int | None = None) -> Batch:
    """Stack episodes into a padded batch; ``max_len`` can force extra padding."""
    lengths = np.array([len(e) for e in episodes])
    l_max = int(lengths.max()) if max_len is None else max_len
    if l_max < lengths.max():
        raise UsageError(f"max_len {l_max} shorter than an episode of length {lengths.max()}")

    def pad(arr, rows, fill=None):
        extra = rows - len(arr)
        if extra == 0:
            return arr
        tail = np.repeat(arr[-1:], extra, axis=0) if fill is None else np.full((extra,) + arr.shape[1:], fill, arr.dtype)
        return np.concatenate([arr, tail], axis=0)

    return Batch(
        task_id=episodes[0].task_id,
        obs=np.stack([pad(e.obs, l_max + 1) for e in episodes]),
        state=np.stack([pad(e.state, l_max + 1) for e in episodes]),
        avail=np.stack([pad(e.avail, l_max + 1) for e in episodes]),
        actions=np.stack([pad(e.actions, l_max, 0) for e in episodes]),
        reward=np.stack([pad(e.reward, l_max, 0) for e in episodes]),
        terminated=np.stack([pad(e.terminated, l_max, True) for e in episodes]),
        filled=np.arange(l_max)[None, :] < lengths[:, None],
        lengths=lengths,
    )


class NotReady(UsageError):
    """Raised when a buffer holds fewer episodes than the requested batch."""


class ReplayBuffer:
    """FIFO store of whole episodes for one task."""

    def __init__(self, task_id: str, capacity: int = 5000):
        if capacity < 1:
            raise UsageError("replay capacity must be positive")
        self.task_id = task_id
        self.capacity = capacity
        self.episodes: deque[Episode] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.episodes)

    def ready(self, batch_size: int) -> bool:
        return len(self.episodes) >= batch_size

    def push(self, episode: Episode) -> None:
        if episode.task_id != self.task_id:
            raise UsageError(f"episode of {episode.task_id} pushed into buffer for {self.task_id}")
        self.episodes.append(episode)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        # with replacement, so any non-empty buffer can serve a batch; the
        # trainer itself waits for ready(batch_size) before its first update
        if not self.episodes:
            raise NotReady(f"{self.task_id}: buffer is empty")
        if batch_size < 1:
            raise UsageError("batch size must be positive")
        return rng.integers(0, len(self.episodes), size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sampling with replacement."""
        idx = self.sample_indices(batch_size, rng)
        return pad_batch([self.episodes[i] for i in idx])


def push_episode(buffer: ReplayBuffer, episode: Episode) -> None:
    buffer.push(episode)


def sample_batch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Batch:
    return buffer.sample(batch_size, rng)
