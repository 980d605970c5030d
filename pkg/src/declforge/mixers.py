"""Mixing networks that combine per-agent Q values into a team value."""

from __future__ import annotations

import numpy as np

from . import nnkit as nn
from .errors import ConfigError
from .nnkit import Dense, Param, Tape, Var


def vdn_mix(chosen_q) -> float:
    """Additive mixing of a single vector of per-agent values."""
    return float(np.sum(np.asarray(chosen_q, dtype=np.float64)))


class VdnMixer:
    kind = "vdn"

    def params(self) -> list[Param]:
        return []

    def __call__(self, q: Var, state: Var | None = None, tape: Tape | None = None) -> Var:
        return nn.sum_(q, axis=-1, tape=tape)

    def forward_numpy(self, q: np.ndarray, state: np.ndarray | None = None) -> np.ndarray:
        return np.asarray(q).sum(axis=-1)


class QmixMixer:
    """State-conditioned monotonic mixer.

    Hypernetworks map the global state to the weights of a two-layer mixing
    net over the agent values. Mixing weights pass through ``abs`` so the
    output never decreases when any agent value increases; the bias paths are
    unconstrained. ``monotonic=False`` drops the ``abs`` and exists only as a
    negative control for :func:`monotonicity_audit`.
    """

    kind = "qmix"

    def __init__(
        self,
        name: str,
        n_agents: int,
        state_dim: int,
        rng: np.random.Generator,
        hidden: int = 32,
        monotonic: bool = True,
    ):
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.hidden = hidden
        self.monotonic = monotonic
        self.hyper_w1 = Dense(f"{name}/hyper_w1", state_dim, n_agents * hidden, rng)
        self.hyper_b1 = Dense(f"{name}/hyper_b1", state_dim, hidden, rng)
        self.hyper_w2 = Dense(f"{name}/hyper_w2", state_dim, hidden, rng)
        self.hyper_b2a = Dense(f"{name}/hyper_b2a", state_dim, hidden, rng)
        self.hyper_b2b = Dense(f"{name}/hyper_b2b", hidden, 1, rng)

    def layers(self) -> list[Dense]:
        return [self.hyper_w1, self.hyper_b1, self.hyper_w2, self.hyper_b2a, self.hyper_b2b]

    def params(self) -> list[Param]:
        return [p for layer in self.layers() for p in layer.params()]

    def _check(self, q_shape, s_shape) -> None:
        if q_shape[-1] != self.n_agents:
            raise ConfigError(f"qmix expects {self.n_agents} agent values, got {q_shape[-1]}")
        if s_shape[-1] != self.state_dim:
            raise ConfigError(f"qmix expects state_dim {self.state_dim}, got {s_shape[-1]}")

    def __call__(self, q: Var, state: Var, tape: Tape | None = None) -> Var:
        self._check(q.shape, state.shape)
        lead = q.shape[:-1]
        rows = int(np.prod(lead)) if lead else 1
        n, h = self.n_agents, self.hidden
        q2 = nn.reshape(q, (rows, 1, n), tape)
        s2 = nn.reshape(state, (rows, self.state_dim), tape)
        w1 = self.hyper_w1(s2, tape)
        w2 = self.hyper_w2(s2, tape)
        if self.monotonic:
            w1 = nn.abs_(w1, tape)
            w2 = nn.abs_(w2, tape)
        w1 = nn.reshape(w1, (rows, n, h), tape)
        mixed = nn.reshape(nn.matmul(q2, w1, tape), (rows, h), tape)
        hidden = nn.relu(nn.add(mixed, self.hyper_b1(s2, tape), tape), tape)
        b2 = self.hyper_b2b(nn.relu(self.hyper_b2a(s2, tape), tape), tape)
        out = nn.add(nn.sum_(nn.mul(hidden, w2, tape), axis=-1, tape=tape), nn.reshape(b2, (rows,), tape), tape)
        return nn.reshape(out, lead, tape)

    def forward_numpy(self, q: np.ndarray, state: np.ndarray, dtype=None) -> np.ndarray:
        """Untracked forward; ``dtype=np.float64`` evaluates with promoted weights."""
        self._check(np.shape(q), np.shape(state))

        def dense(layer, x):
            w, b = layer.w.value, layer.b.value
            if dtype is not None:
                w, b = w.astype(dtype), b.astype(dtype)
            return x @ w.T + b

        q = np.asarray(q, dtype=dtype)
        state = np.asarray(state, dtype=dtype)
        w1 = dense(self.hyper_w1, state)
        w2 = dense(self.hyper_w2, state)
        if self.monotonic:
            w1, w2 = np.abs(w1), np.abs(w2)
        w1 = w1.reshape(state.shape[:-1] + (self.n_agents, self.hidden))
        hidden = np.maximum(np.einsum("...n,...nh->...h", q, w1) + dense(self.hyper_b1, state), 0)
        b2 = dense(self.hyper_b2b, np.maximum(dense(self.hyper_b2a, state), 0))[..., 0]
        return (hidden * w2).sum(axis=-1) + b2


def qmix_mix(mixer: QmixMixer, q, state) -> float:
    """Team value for one vector of agent values under ``state``."""
    return float(mixer.forward_numpy(np.asarray(q)[None], np.asarray(state)[None])[0])


def monotonicity_audit(mixer: QmixMixer, n_samples: int, rng: np.random.Generator, step: float = 1e-3) -> float:
    """Largest negative slope of the team value w.r.t. any agent value.

    Samples ``n_samples`` random (agent values, state) pairs, takes central
    differences in float64 and returns ``max(0, -slope)`` over all samples and
    agents. A monotonic mixer returns 0 up to rounding.
    """
    if n_samples < 1:
        raise ConfigError("monotonicity audit needs at least one sample")
    q = rng.normal(0.0, 5.0, size=(n_samples, mixer.n_agents))
    state = rng.uniform(-1.0, 1.0, size=(n_samples, mixer.state_dim))
    worst = 0.0
    for i in range(mixer.n_agents):
        bump = np.zeros(mixer.n_agents)
        bump[i] = step
        up = mixer.forward_numpy(q + bump, state, dtype=np.float64)
        down = mixer.forward_numpy(q - bump, state, dtype=np.float64)
        slope = (up - down) / (2 * step)
        worst = max(worst, float(np.max(-slope)))
    return max(worst, 0.0)


def make_mixer(kind: str, name: str, n_agents: int, state_dim: int, rng: np.random.Generator, hidden: int = 32):
    if kind == "vdn":
        return VdnMixer()
    if kind == "qmix":
        return QmixMixer(name, n_agents, state_dim, rng, hidden=hidden)
    raise ConfigError(f"unknown mixer {kind!r}")
