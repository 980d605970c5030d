"""Action Prepositioning Network and the action-at-output baseline.

Each task owns a Perception Layer (PerL): a trunk over
``observation || one-hot last action || one-hot agent id`` followed by a GRU
that encodes the agent's history into ``d`` features. In the ``apn``
architecture a candidate head then pairs the hidden state with the one-hot of
every candidate action, giving a ``[K, d]`` feature matrix, and the shared
Decision Layer (DecL, ``d -> d -> 1``) scores each row. Because DecL only
ever sees ``d``-wide rows and emits one value per row, the same DecL serves
tasks with any observation or action size.

The ``original`` architecture replaces candidate head and DecL by a per-task
linear head ``d -> K``.

One PerL is shared by all agents of a task; the agent id one-hot tells them
apart.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nnkit as nn
from .envsuite import TaskSpec
from .errors import CheckpointError, ConfigError, UsageError
from .mixers import make_mixer
from .nnkit import Dense, Gru, Param, Tape, Var

ARCHS = ("apn", "original")
SCOPES = ("decl", "full")
MAGIC = b"APNC"
FORMAT_VERSION = 1


class PerL:
    def __init__(self, spec: TaskSpec, d: int, arch: str, rng: np.random.Generator):
        if arch not in ARCHS:
            raise ConfigError(f"unknown architecture {arch!r}")
        k, n = spec.action_space_size, spec.n_agents
        prefix = f"perl/{spec.task_id}"
        self.spec = spec
        self.arch = arch
        self.trunk = Dense(f"{prefix}/trunk", spec.obs_dim + k + n, d, rng)
        self.gru = Gru(f"{prefix}/gru", d, d, rng)
        if arch == "apn":
            self.cand = Dense(f"{prefix}/cand", d + k, d, rng)
        else:
            self.head = Dense(f"{prefix}/head", d, k, rng)

    @property
    def d(self) -> int:
        return self.gru.hidden

    def layers(self):
        last = self.cand if self.arch == "apn" else self.head
        return [self.trunk, self.gru, last]

    def params(self) -> list[Param]:
        return [p for layer in self.layers() for p in layer.params()]


class DecL:
    def __init__(self, d: int, rng: np.random.Generator):
        self.l1 = Dense("decl/l1", d, d, rng)
        self.l2 = Dense("decl/l2", d, 1, rng)

    @property
    def d(self) -> int:
        return self.l1.in_dim

    def params(self) -> list[Param]:
        return self.l1.params() + self.l2.params()


# ---------------------------------------------------------------------------
# per-agent building blocks


def perl_inputs(spec: TaskSpec, obs: np.ndarray, last_action: np.ndarray) -> np.ndarray:
    """Trunk inputs for all agents: ``obs || onehot(last action) || onehot(id)``.

    ``obs`` is ``[..., N, obs_dim]`` and ``last_action`` ``[..., N]``; a
    negative last action means "none yet" and encodes as all zeros.
    """
    obs = np.asarray(obs, dtype=np.float32)
    n, k = spec.n_agents, spec.action_space_size
    if obs.shape[-2:] != (n, spec.obs_dim):
        raise ConfigError(f"{spec.task_id}: observations {obs.shape[-2:]}, expected {(n, spec.obs_dim)}")
    last_action = np.asarray(last_action)
    lead = obs.shape[:-1]
    act = np.zeros(lead + (k,), dtype=np.float32)
    has = last_action >= 0
    idx = np.nonzero(has)
    act[idx + (last_action[has],)] = 1.0
    ids = np.broadcast_to(np.eye(n, dtype=np.float32), lead + (n,))
    return np.concatenate([obs, act, ids], axis=-1)


def _trunk_features(perl: PerL, x: Var, tape: Tape | None) -> Var:
    return nn.relu(perl.trunk(x, tape), tape)


def perl_encode(
    perl: PerL,
    obs,
    last_action: int | None,
    agent_id: int,
    h,
    tape: Tape | None = None,
) -> Var:
    """One history step for one agent; returns the new hidden state."""
    spec = perl.spec
    obs = np.asarray(obs, dtype=np.float32)
    if obs.shape != (spec.obs_dim,):
        raise ConfigError(f"{spec.task_id}: observation length {obs.shape}, expected {spec.obs_dim}")
    if not 0 <= agent_id < spec.n_agents:
        raise ConfigError(f"{spec.task_id}: agent id {agent_id} out of range")
    if last_action is not None and not 0 <= last_action < spec.action_space_size:
        raise ConfigError(f"{spec.task_id}: last action {last_action} out of range")
    x = np.zeros(spec.obs_dim + spec.action_space_size + spec.n_agents, dtype=np.float32)
    x[: spec.obs_dim] = obs
    if last_action is not None:
        x[spec.obs_dim + last_action] = 1.0
    x[spec.obs_dim + spec.action_space_size + agent_id] = 1.0
    h = h if isinstance(h, Var) else nn.const(h)
    return perl.gru.step(_trunk_features(perl, nn.const(x), tape), h, tape)


def candidate_features(
    perl: PerL,
    h: Var,
    k: int | None = None,
    tape: Tape | None = None,
    actions: np.ndarray | None = None,
) -> Var:
    """Feature rows ``relu(W [h || onehot(a_k)] + b)`` for every candidate action.

    ``h`` is ``[..., d]``; the result is ``[..., K, d]``. With ``actions``
    (shape ``h.shape[:-1]``) only the row of that action is built and the
    result is ``[..., d]``. The weight columns that multiply the action one-hot
    are read directly instead of multiplying explicit one-hot vectors.
    """
    if perl.arch != "apn":
        raise UsageError("candidate features exist only in the apn architecture")
    k = perl.spec.action_space_size if k is None else k
    w, b = perl.cand.w, perl.cand.b
    d = h.shape[-1]
    if w.shape[1] != d + k:
        raise ConfigError(f"candidate head expects {w.shape[1] - k}+{k} inputs, got {d}+{k}")
    hv = h.value
    wv = w.value
    base = nn.mm(hv, wv[:, :d].T)
    action_bias = wv[:, d:].T + b.value
    if actions is None:
        pre = base[..., None, :] + action_bias
    else:
        actions = np.asarray(actions)
        pre = base + action_bias[actions]
    feats = np.maximum(pre, 0)
    out = Var(feats)

    def bwd():
        g = out.grad
        if g is None:
            return
        g = g * (pre > 0)
        gbase = g.sum(axis=-2) if actions is None else g
        if w.requires_grad:
            gw = np.empty_like(wv)
            gw[:, :d] = gbase.reshape(-1, d).T @ hv.reshape(-1, d)
            if actions is None:
                gw[:, d:] = g.reshape(-1, k, g.shape[-1]).sum(axis=0).T
            else:
                per_action = np.zeros((k, g.shape[-1]), dtype=g.dtype)
                np.add.at(per_action, actions.reshape(-1), g.reshape(-1, g.shape[-1]))
                gw[:, d:] = per_action.T
            w._acc(gw)
        if b.requires_grad:
            b._acc(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if h.requires_grad:
            h._acc(nn.mm(gbase, wv[:, :d]))

    return nn._track(tape, out, (h, w, b), bwd)


def decl_eval(decl: DecL, feats: Var, tape: Tape | None = None) -> Var:
    """Score every feature row: ``[..., K, d] -> [..., K]`` (one scalar per row)."""
    if feats.shape[-1] != decl.d:
        raise CheckpointError("d", f"features have d={feats.shape[-1]} but the decision layer has d={decl.d}")
    hidden = nn.relu(decl.l1(feats, tape), tape)
    q = decl.l2(hidden, tape)
    return nn.reshape(q, q.shape[:-1], tape)


def baseline_q_forward(perl: PerL, obs, last_action: int | None, agent_id: int, h, tape: Tape | None = None):
    """Action-at-output step: returns ``(Q [K], h')``."""
    if perl.arch != "original":
        raise UsageError("baseline head exists only in the original architecture")
    h_new = perl_encode(perl, obs, last_action, agent_id, h, tape)
    return perl.head(h_new, tape), h_new


def select_action(q, mask, epsilon: float, rng: np.random.Generator | None) -> int:
    """Epsilon-greedy over available actions; greedy ties go to the lowest index."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise UsageError("no available action")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.choice(np.flatnonzero(mask)))
    return int(np.argmax(np.where(mask, np.asarray(q, dtype=np.float64), -np.inf)))


# ---------------------------------------------------------------------------
# the network


@dataclass(eq=False)
class ApnNet:
    """Per-task PerLs and mixers around one shared DecL."""

    d: int = 64
    arch: str = "apn"
    seed: int = 0
    mixer_hidden: int = 32
    tasks: dict[str, TaskSpec] = field(default_factory=dict)
    perls: dict[str, PerL] = field(default_factory=dict)
    mixers: dict = field(default_factory=dict)
    decl: DecL | None = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.d <= 0:
            raise ConfigError(f"feature dimension must be positive, got {self.d}")
        self.rng = np.random.default_rng(self.seed)
        if self.arch == "apn" and self.decl is None:
            self.decl = DecL(self.d, self.rng)

    def add_task(self, spec: TaskSpec, mixer: str = "vdn") -> None:
        if spec.task_id in self.tasks:
            raise ConfigError(f"task {spec.task_id} already registered")
        self.tasks[spec.task_id] = spec
        self.perls[spec.task_id] = PerL(spec, self.d, self.arch, self.rng)
        self.mixers[spec.task_id] = make_mixer(
            mixer, f"mixer/{spec.task_id}", spec.n_agents, spec.state_dim, self.rng, self.mixer_hidden
        )

    def params(self) -> list[Param]:
        out = []
        if self.decl is not None:
            out += self.decl.params()
        for tid in self.tasks:
            out += self.perls[tid].params()
            out += self.mixers[tid].params()
        return out

    def component_params(self, component: str, task_id: str | None = None) -> list[Param]:
        if component == "decl":
            if self.decl is None:
                raise UsageError("the original architecture has no decision layer")
            return self.decl.params()
        if component == "perl":
            if task_id not in self.perls:
                raise UsageError(f"no perception layer for task {task_id!r}")
            return self.perls[task_id].params()
        if component == "mixer":
            if task_id not in self.mixers:
                raise UsageError(f"no mixer for task {task_id!r}")
            return self.mixers[task_id].params()
        raise UsageError(f"unknown component {component!r}")

    def freeze(self, component: str, task_id: str | None = None) -> None:
        for p in self.component_params(component, task_id):
            p.frozen = True

    def unfreeze(self, component: str, task_id: str | None = None) -> None:
        for p in self.component_params(component, task_id):
            p.frozen = False

    def init_hidden(self, task_id: str, lead: tuple[int, ...] = ()) -> np.ndarray:
        """All-zero hidden states for every agent of ``task_id`` (episode start)."""
        return np.zeros(lead + (self.tasks[task_id].n_agents, self.d), dtype=np.float32)

    # -- forward passes ----------------------------------------------------

    def _head(self, task_id: str, h: Var, tape: Tape | None, actions=None) -> Var:
        perl = self.perls[task_id]
        if self.arch == "apn":
            return decl_eval(self.decl, candidate_features(perl, h, tape=tape, actions=actions), tape)
        q = perl.head(h, tape)
        return q if actions is None else nn.take(q, actions, tape)

    def act(self, task_id: str, obs, last_action, h) -> tuple[np.ndarray, np.ndarray]:
        """Untracked step for a batch of agents.

        ``obs`` ``[..., N, obs_dim]``, ``last_action`` ``[..., N]`` (negative for
        none), ``h`` ``[..., N, d]``. Returns ``(Q [..., N, K], h')``; ``h`` is
        not modified.
        """
        perl = self.perls[task_id]
        x = nn.const(perl_inputs(perl.spec, obs, last_action))
        h_new = perl.gru.step(_trunk_features(perl, x, None), nn.const(h), None)
        return self._head(task_id, h_new, None).value, h_new.value

    def q_rows(self, task_id: str, inputs: np.ndarray, index, tape: Tape | None = None, actions=None) -> Var:
        """Q values for selected time steps of padded sequences.

        ``inputs`` are trunk inputs ``[T, B, N, in]`` (see :func:`perl_inputs`);
        the GRU runs over the full padded time axis from a zero state, then only
        the ``(t, b)`` pairs in ``index`` go through the (expensive) value head.
        Returns ``[R, N, K]``, or ``[R, N]`` when ``actions [R, N]`` selects one
        action per agent (the APN then scores only that candidate).
        """
        perl = self.perls[task_id]
        t_len, b, n, _ = inputs.shape
        feats = _trunk_features(perl, nn.const(inputs), tape)
        h0 = nn.const(np.zeros((b, n, self.d), dtype=np.float32))
        hs = perl.gru.sequence(feats, h0, tape)
        return self._head(task_id, nn.rows(hs, index, tape, unique=True), tape, actions)


def sync_target(net: ApnNet, target: ApnNet | None = None) -> ApnNet:
    """Copy every parameter of ``net`` into ``target`` (a fresh deep copy if None)."""
    if target is None:
        return copy.deepcopy(net)
    src, dst = net.params(), target.params()
    if len(src) != len(dst):
        raise UsageError("target network has a different structure")
    for s, t in zip(src, dst):
        if s.name != t.name or s.shape != t.shape:
            raise UsageError(f"target parameter {t.name} does not match {s.name}")
        np.copyto(t.value, s.value)
    return target


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict
    version: int = FORMAT_VERSION

    @property
    def d(self) -> int:
        return int(self.meta["d"])


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Layout (little endian): ``APNC``, u32 version, u32 count, then per array
    u16 name length, UTF-8 name, u8 rank, u32 dims, float32 payload; finally a
    u32-length-prefixed UTF-8 JSON metadata block."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(text)))
    chunks.append(text)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(field, "file truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def read_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError("path", str(exc)) from exc
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("magic", "not an APNC checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError("version", f"unsupported format version {version}")
    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"array[{i}].name_length")
        try:
            name = r.take(name_len, f"array[{i}].name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"array[{i}].name", "invalid UTF-8") from exc
        (rank,) = r.unpack("<B", f"{name}.rank")
        dims = r.unpack(f"<{rank}I", f"{name}.dims")
        size = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * size, f"{name}.payload")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (meta_len,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("metadata", "unreadable metadata block") from exc
    if r.pos != len(data):
        raise CheckpointError("trailing", f"{len(data) - r.pos} unexpected bytes after the metadata")
    if not isinstance(meta, dict) or "d" not in meta:
        raise CheckpointError("metadata", "missing d")
    return Checkpoint(arrays=arrays, meta=meta, version=version)


def _scope_params(net: ApnNet, scope: str) -> list[Param]:
    if scope == "decl":
        return net.component_params("decl")
    if scope == "full":
        return net.params()
    raise UsageError(f"unknown checkpoint scope {scope!r}")


def save_checkpoint(net: ApnNet, path, scope: str = "decl", **meta) -> None:
    """Write the DecL (``scope="decl"``) or every parameter (``scope="full"``)."""
    params = _scope_params(net, scope)
    info = {
        "d": net.d,
        "scope": scope,
        "arch": net.arch,
        "task_ids": list(net.tasks),
        "mixers": {tid: m.kind for tid, m in net.mixers.items()},
    }
    info.update(meta)
    write_checkpoint(path, {p.name: p.value for p in params}, info)


def load_checkpoint(path, into: ApnNet) -> dict:
    """Load a checkpoint into ``into``; returns the metadata.

    A decl-scope file only touches the DecL and so loads into any net with the
    same ``d`` whatever its tasks are. A full-scope file must match the net's
    parameter set exactly.
    """
    ckpt = read_checkpoint(path)
    if ckpt.d != into.d:
        raise CheckpointError("d", f"checkpoint has d={ckpt.d} but the network has d={into.d}")
    scope = ckpt.meta.get("scope", "decl")
    params = _scope_params(into, scope)
    expected = {p.name for p in params}
    if set(ckpt.arrays) != expected:
        missing = sorted(expected - set(ckpt.arrays))
        extra = sorted(set(ckpt.arrays) - expected)
        raise CheckpointError("arrays", f"missing {missing}, unexpected {extra}")
    for p in params:
        arr = ckpt.arrays[p.name]
        if arr.shape != p.shape:
            raise CheckpointError(p.name, f"shape {arr.shape}, network expects {p.shape}")
    for p in params:
        np.copyto(p.value, ckpt.arrays[p.name])
    return ckpt.meta


def decl_arrays(net: ApnNet) -> dict[str, np.ndarray]:
    return {p.name: p.value.copy() for p in net.component_params("decl")}


def net_from_checkpoint(path, seed: int = 0) -> ApnNet:
    """Rebuild a network from a full-scope checkpoint (tasks from metadata)."""
    from .envsuite import task_from_name

    ckpt = read_checkpoint(path)
    if ckpt.meta.get("scope") != "full":
        raise CheckpointError("scope", "a full-scope checkpoint is needed to rebuild a network")
    net = ApnNet(d=ckpt.d, arch=ckpt.meta.get("arch", "apn"), seed=seed)
    mixers = ckpt.meta.get("mixers", {})
    for tid in ckpt.meta["task_ids"]:
        net.add_task(task_from_name(tid), mixers.get(tid, "vdn"))
    load_checkpoint(path, net)
    return net
