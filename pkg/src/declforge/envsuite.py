"""Cooperative grid-world Dec-POMDPs with task-dependent observation and action sizes.

Two families:

* ``TeamReach(N, W, H, C)`` - N agents must simultaneously cover N fixed goal
  cells on a W x H grid. Each agent has C extra "signal" actions that set a
  value its teammates see in their next observation.
* ``PreyChase(N, W)`` - N predators on a W x W grid must pin a fleeing prey
  with at least two of them 4-adjacent to it.

Both give one shared team reward: ``-0.01`` per step plus ``+10`` on the
winning step. Episodes end on a win or at the horizon.

Cells are ``(x, y)`` with ``y`` growing downwards. Movement actions are
``0 stay, 1 up, 2 down, 3 left, 4 right``.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError

STEP_REWARD = -0.01
WIN_REWARD = 10.0
MOVES = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))
TEAM_REACH = "TeamReach"
PREY_CHASE = "PreyChase"
_FAMILIES = {TEAM_REACH.lower(): TEAM_REACH, PREY_CHASE.lower(): PREY_CHASE}
GOAL_CLIP = 3
PREY_CLIP = 5


@dataclass(frozen=True)
class TaskSpec:
    family: str
    params: tuple[int, ...]
    n_agents: int
    action_space_size: int
    obs_dim: int
    state_dim: int
    horizon: int
    task_id: str

    @property
    def width(self) -> int:
        return self.params[1]

    @property
    def height(self) -> int:
        return self.params[2] if self.family == TEAM_REACH else self.params[1]

    @property
    def n_signals(self) -> int:
        return self.params[3] if self.family == TEAM_REACH else 0


def make_task(family: str, *params: int) -> TaskSpec:
    """Build a TaskSpec; dimensions are pure functions of (family, params)."""
    params = tuple(int(p) for p in params)
    family = _FAMILIES.get(str(family).lower(), family)
    if family == TEAM_REACH:
        if len(params) != 4:
            raise ConfigError(f"TeamReach takes (N, W, H, C), got {params}")
        n, w, h, c = params
        if n < 2 or w < 2 or h < 2 or c < 0:
            raise ConfigError(f"TeamReach needs N>=2, W>=2, H>=2, C>=0, got {params}")
        if n > w * h / 2:
            raise ConfigError(f"TeamReach with N={n} does not fit a {w}x{h} grid")
        return TaskSpec(
            family=TEAM_REACH,
            params=params,
            n_agents=n,
            action_space_size=5 + c,
            obs_dim=2 + n * c + 2 * n + 2 * (n - 1),
            state_dim=2 * n + 2 * n + n * c,
            horizon=4 * (w + h),
            task_id=f"teamreach-N{n}-W{w}-H{h}-C{c}",
        )
    if family == PREY_CHASE:
        if len(params) != 2:
            raise ConfigError(f"PreyChase takes (N, W), got {params}")
        n, w = params
        if n < 2 or w < 2:
            raise ConfigError(f"PreyChase needs N>=2, W>=2, got {params}")
        if n > w * w / 2:
            raise ConfigError(f"PreyChase with N={n} does not fit a {w}x{w} grid")
        return TaskSpec(
            family=PREY_CHASE,
            params=params,
            n_agents=n,
            action_space_size=5,
            obs_dim=4 + 2 * (n - 1),
            state_dim=2 * n + 2,
            horizon=8 * w,
            task_id=f"preychase-N{n}-W{w}",
        )
    raise ConfigError(f"unknown task family {family!r}")


_REGISTRY_PATTERNS = (
    (re.compile(r"^teamreach-N(\d+)-W(\d+)-H(\d+)-C(\d+)$"), TEAM_REACH),
    (re.compile(r"^preychase-N(\d+)-W(\d+)$"), PREY_CHASE),
)


def task_from_name(name: str) -> TaskSpec:
    """Parse a registry name such as ``teamreach-N2-W5-H5-C0`` or ``preychase-N2-W7``."""
    for pattern, family in _REGISTRY_PATTERNS:
        m = pattern.match(name.strip())
        if m:
            return make_task(family, *(int(g) for g in m.groups()))
    raise ConfigError(f"unknown task name {name!r}")


def goal_cells(spec: TaskSpec) -> tuple[tuple[int, int], ...]:
    """Goal cells of a TeamReach task, drawn once from a hash of its task id."""
    rng = np.random.default_rng(zlib.crc32(spec.task_id.encode("utf-8")))
    cells = rng.choice(spec.width * spec.height, size=spec.n_agents, replace=False)
    return tuple((int(c % spec.width), int(c // spec.width)) for c in cells)


@dataclass
class EnvState:
    spec: TaskSpec
    positions: list[tuple[int, int]]
    goals: tuple[tuple[int, int], ...] = ()
    prey: tuple[int, int] | None = None
    signals: list[int] = field(default_factory=list)
    t: int = 0
    done: bool = False
    rng: np.random.Generator | None = None

    def copy(self) -> EnvState:
        # the generator is only drawn from in reset(), so copies share it
        return EnvState(
            spec=self.spec,
            positions=list(self.positions),
            goals=self.goals,
            prey=self.prey,
            signals=list(self.signals),
            t=self.t,
            done=self.done,
            rng=self.rng,
        )

    def same_as(self, other: EnvState) -> bool:
        """Structural equality, including the generator state."""
        rng_state = (lambda s: s.rng.bit_generator.state if s.rng is not None else None)
        return (
            self.spec == other.spec
            and self.positions == other.positions
            and self.goals == other.goals
            and self.prey == other.prey
            and self.signals == other.signals
            and self.t == other.t
            and self.done == other.done
            and rng_state(self) == rng_state(other)
        )


@dataclass
class StepResult:
    observations: np.ndarray  # [N, obs_dim] float32
    global_state: np.ndarray  # [state_dim] float32
    reward: float
    terminated: bool
    win: bool
    available_actions: np.ndarray  # [N, K] bool


def reset(spec: TaskSpec, seed: int) -> tuple[EnvState, StepResult]:
    rng = np.random.default_rng(seed)
    n, w, h = spec.n_agents, spec.width, spec.height
    if spec.family == TEAM_REACH:
        goals = goal_cells(spec)
        blocked = {y * w + x for x, y in goals}
        free = np.array([c for c in range(w * h) if c not in blocked])
        picks = rng.choice(free, size=n, replace=False)
        state = EnvState(
            spec=spec,
            positions=[(int(c % w), int(c // w)) for c in picks],
            goals=goals,
            signals=[0] * n,
            rng=rng,
        )
    else:
        prey = (w // 2, w // 2)
        free = np.array([c for c in range(w * h) if c != prey[1] * w + prey[0]])
        picks = rng.choice(free, size=n, replace=False)
        state = EnvState(
            spec=spec,
            positions=[(int(c % w), int(c // w)) for c in picks],
            prey=prey,
            rng=rng,
        )
    return state, _result(state, 0.0, False, False)


def step(state: EnvState, joint_action) -> tuple[EnvState, StepResult]:
    """Advance one step. Returns a new state; ``state`` is left untouched."""
    spec = state.spec
    if state.done:
        raise UsageError("step called on a terminated episode")
    actions = [int(a) for a in joint_action]
    if len(actions) != spec.n_agents:
        raise UsageError(f"expected {spec.n_agents} actions, got {len(actions)}")
    for i, a in enumerate(actions):
        if not 0 <= a < spec.action_space_size:
            raise UsageError(f"agent {i} action {a} outside [0, {spec.action_space_size})")

    nxt = state.copy()
    w, h = spec.width, spec.height
    occupied = set(nxt.positions)
    if nxt.prey is not None:
        occupied.add(nxt.prey)
    for i, a in enumerate(actions):
        if a >= 5:
            nxt.signals[i] = a - 4
            continue
        if a == 0:
            continue
        x, y = nxt.positions[i]
        tx, ty = x + MOVES[a][0], y + MOVES[a][1]
        if 0 <= tx < w and 0 <= ty < h and (tx, ty) not in occupied:
            occupied.discard((x, y))
            occupied.add((tx, ty))
            nxt.positions[i] = (tx, ty)

    if spec.family == TEAM_REACH:
        win = all(g in occupied for g in nxt.goals)
    else:
        # capture is checked before the prey flees and again after it moves
        win = _captured(nxt.prey, nxt.positions)
        if not win:
            nxt.prey = _flee(nxt.prey, nxt.positions, w, h)
            win = _captured(nxt.prey, nxt.positions)

    terminated = win or state.t + 1 >= spec.horizon
    nxt.t = state.t + 1
    nxt.done = terminated
    reward = STEP_REWARD + (WIN_REWARD if win else 0.0)
    return nxt, _result(nxt, reward, terminated, win)


def _captured(prey, predators) -> bool:
    px, py = prey
    return sum(abs(x - px) + abs(y - py) == 1 for x, y in predators) >= 2


def _flee(prey, predators, w, h):
    taken = set(predators)
    best, best_dist = prey, -1
    for dx, dy in MOVES:
        cell = (prey[0] + dx, prey[1] + dy)
        if not (0 <= cell[0] < w and 0 <= cell[1] < h) or cell in taken:
            continue
        dist = min(abs(cell[0] - x) + abs(cell[1] - y) for x, y in predators)
        if dist > best_dist:
            best, best_dist = cell, dist
    return best


def _result(state: EnvState, reward: float, terminated: bool, win: bool) -> StepResult:
    return StepResult(
        observations=observe_all(state),
        global_state=global_state(state),
        reward=reward,
        terminated=terminated,
        win=win,
        available_actions=available_all(state),
    )


def observe_all(state: EnvState) -> np.ndarray:
    spec = state.spec
    n, w, h = spec.n_agents, spec.width, spec.height
    pos = np.array(state.positions, dtype=np.float32)
    own = pos / np.array([w - 1, h - 1], dtype=np.float32)
    others = _teammate_offsets(pos, GOAL_CLIP if spec.family == TEAM_REACH else PREY_CLIP)
    if spec.family == TEAM_REACH:
        c = spec.n_signals
        signal_block = np.broadcast_to(_signal_onehot(state.signals, c).reshape(1, n * c), (n, n * c))
        goals = np.array(state.goals, dtype=np.float32)
        goal_off = np.clip(goals[None, :, :] - pos[:, None, :], -GOAL_CLIP, GOAL_CLIP) / GOAL_CLIP
        parts = [own, signal_block, goal_off.reshape(n, 2 * n), others]
    else:
        prey = np.array(state.prey, dtype=np.float32)
        prey_off = np.clip(prey[None, :] - pos, -PREY_CLIP, PREY_CLIP) / PREY_CLIP
        parts = [own, prey_off, others]
    return np.concatenate(parts, axis=1).astype(np.float32)


def observe(state: EnvState, agent_index: int) -> np.ndarray:
    if not 0 <= agent_index < state.spec.n_agents:
        raise UsageError(f"agent index {agent_index} out of range")
    return observe_all(state)[agent_index]


def _teammate_offsets(pos: np.ndarray, clip: int) -> np.ndarray:
    n = pos.shape[0]
    off = np.clip(pos[None, :, :] - pos[:, None, :], -clip, clip) / clip
    keep = ~np.eye(n, dtype=bool)
    return off[keep].reshape(n, 2 * (n - 1))


def _signal_onehot(signals, c: int) -> np.ndarray:
    out = np.zeros((len(signals), c), dtype=np.float32)
    for i, s in enumerate(signals):
        if s > 0:
            out[i, s - 1] = 1.0
    return out


def global_state(state: EnvState) -> np.ndarray:
    spec = state.spec
    scale = np.array([spec.width - 1, spec.height - 1], dtype=np.float32)
    pos = (np.array(state.positions, dtype=np.float32) / scale).reshape(-1)
    if spec.family == TEAM_REACH:
        goals = (np.array(state.goals, dtype=np.float32) / scale).reshape(-1)
        signals = _signal_onehot(state.signals, spec.n_signals).reshape(-1)
        return np.concatenate([pos, goals, signals]).astype(np.float32)
    prey = np.array(state.prey, dtype=np.float32) / scale
    return np.concatenate([pos, prey]).astype(np.float32)


def available_all(state: EnvState) -> np.ndarray:
    spec = state.spec
    avail = np.ones((spec.n_agents, spec.action_space_size), dtype=bool)
    for i, (x, y) in enumerate(state.positions):
        avail[i, 1] = y > 0
        avail[i, 2] = y < spec.height - 1
        avail[i, 3] = x > 0
        avail[i, 4] = x < spec.width - 1
    return avail


def available_actions(state: EnvState, agent_index: int) -> np.ndarray:
    if not 0 <= agent_index < state.spec.n_agents:
        raise UsageError(f"agent index {agent_index} out of range")
    return available_all(state)[agent_index]


def with_layout(spec: TaskSpec, positions, *, goals=None, prey=None, signals=None, t: int = 0) -> EnvState:
    """Build a state from explicit coordinates, for tests and scripted scenarios."""
    positions = [tuple(p) for p in positions]
    if len(positions) != spec.n_agents or len(set(positions)) != len(positions):
        raise ConfigError("positions must be distinct, one per agent")
    for x, y in positions:
        if not (0 <= x < spec.width and 0 <= y < spec.height):
            raise ConfigError(f"position {(x, y)} outside the grid")
    if spec.family == TEAM_REACH:
        goals = tuple(tuple(g) for g in (goals if goals is not None else goal_cells(spec)))
        return EnvState(
            spec=spec,
            positions=positions,
            goals=goals,
            signals=list(signals) if signals is not None else [0] * spec.n_agents,
            t=t,
        )
    prey = tuple(prey) if prey is not None else (spec.width // 2, spec.width // 2)
    if prey in positions:
        raise ConfigError("prey cell is occupied by a predator")
    return EnvState(spec=spec, positions=positions, prey=prey, t=t)
