"""Multi-task pre-training, transfer and from-scratch training of value-decomposition agents.

All modes share one loop: collect one episode per task (round robin), then,
once every task's buffer can fill a batch, take one optimizer step on the
weighted sum of per-task TD losses. Task weights follow the failure rate
measured at the latest evaluation: ``w_n = (1 - win_n) / sum_i (1 - win_i)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import envsuite
from . import nnkit as nn
from .apnnet import (
    ApnNet,
    Checkpoint,
    load_checkpoint,
    perl_inputs,
    select_action,
    sync_target,
)
from .envsuite import TaskSpec, task_from_name
from .errors import ConfigError, NonFiniteError, UsageError
from .replay import Batch, Episode, ReplayBuffer
from .nnkit import RMSprop, Tape, Var

log = logging.getLogger(__name__)

MODES = ("scratch", "pretrain", "transfer_fix", "transfer_finetune")
METRICS_HEADER = (
    "run_id",
    "mode",
    "arch",
    "mixer",
    "task",
    "env_steps",
    "train_steps",
    "eval_win_rate",
    "eval_return",
    "loss",
    "omega",
    "epsilon",
)


@dataclass
class TrainConfig:
    tasks: list[str]
    arch: str = "apn"
    mixer: str = "vdn"
    mode: str = "scratch"
    d: int = 64
    lr: float = 5e-4
    gamma: float = 0.99
    batch: int = 32
    target_sync: int = 200
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_steps: int = 50_000
    eval_interval: int = 2000
    eval_episodes: int = 32
    total_env_steps: int = 150_000
    seed: int = 0
    checkpoint: str | None = None
    buffer_capacity: int = 5000
    grad_clip: float | None = 10.0
    name: str | None = None

    @property
    def label(self) -> str:
        return self.name or f"{self.mode}-{self.arch}-{self.mixer}"

    @property
    def run_id(self) -> str:
        return f"{self.label}-seed{self.seed}"

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigError("at least one task is required")
        specs = [task_from_name(t) for t in self.tasks]
        if len({s.task_id for s in specs}) != len(specs):
            raise ConfigError("duplicate task in task list")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.arch not in ("apn", "original"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.mixer not in ("vdn", "qmix"):
            raise ConfigError(f"unknown mixer {self.mixer!r}")
        if self.mode == "pretrain" and self.arch != "apn":
            raise ConfigError("pre-training shares a decision layer and needs arch = apn")
        if self.mode == "pretrain" and self.mixer != "vdn":
            raise ConfigError("pre-training uses the additive (vdn) mixer")
        if self.mode.startswith("transfer"):
            if self.arch != "apn":
                raise ConfigError("transfer needs arch = apn")
            if not self.checkpoint:
                raise ConfigError("transfer modes need a decision-layer checkpoint")
        if self.mode != "pretrain" and len(self.tasks) != 1:
            raise ConfigError(f"mode {self.mode} trains exactly one task, got {len(self.tasks)}")
        if not 0 <= self.gamma < 1:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.05 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ConfigError("epsilon schedule must satisfy 0.05 <= end <= start <= 1")
        for key in ("d", "batch", "target_sync", "eval_interval", "eval_episodes", "total_env_steps", "buffer_capacity"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.epsilon_anneal_steps < 0:
            raise ConfigError("epsilon_anneal_steps must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


def epsilon_at(config: TrainConfig, env_steps: int) -> float:
    if config.epsilon_anneal_steps == 0:
        return config.epsilon_end
    frac = min(1.0, env_steps / config.epsilon_anneal_steps)
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


# ---------------------------------------------------------------------------
# dynamic task weights


class EmTracker:
    """Latest evaluation metric per task and the loss weights derived from it."""

    def __init__(self, task_ids):
        self.task_ids = list(task_ids)
        self.em = {t: 0.0 for t in self.task_ids}
        self.weights = {t: 1.0 / len(self.task_ids) for t in self.task_ids}
        self._recompute()

    @property
    def em_inverse(self) -> dict[str, float]:
        return {t: 1.0 - v for t, v in self.em.items()}

    def update(self, task_id: str, win_rate: float) -> None:
        if task_id not in self.em:
            raise UsageError(f"unknown task {task_id!r}")
        if not 0.0 <= win_rate <= 1.0:
            raise UsageError(f"win rate must lie in [0, 1], got {win_rate}")
        self.em[task_id] = float(win_rate)
        self._recompute()

    def _recompute(self) -> None:
        inv = self.em_inverse
        total = sum(inv.values())
        if total < 1e-8:
            self.weights = {t: 1.0 / len(self.task_ids) for t in self.task_ids}
        else:
            self.weights = {t: inv[t] / total for t in self.task_ids}


def update_em(tracker: EmTracker, task_id: str, eval_win_rate: float) -> EmTracker:
    tracker.update(task_id, eval_win_rate)
    return tracker


# ---------------------------------------------------------------------------
# acting


def run_episodes(
    net: ApnNet,
    task_id: str,
    seeds,
    epsilon: float,
    rng: np.random.Generator | None,
) -> list[Episode]:
    """Play one episode per seed in lockstep, batching the network over episodes."""
    spec = net.tasks[task_id]
    n = spec.n_agents
    pairs = [envsuite.reset(spec, int(s)) for s in seeds]
    states = [p[0] for p in pairs]
    results = [p[1] for p in pairs]
    count = len(states)
    h = net.init_hidden(task_id, (count,))
    last = -np.ones((count, n), dtype=np.int64)
    rec = [
        {"obs": [r.observations], "state": [r.global_state], "avail": [r.available_actions], "act": [], "rew": [], "term": []}
        for r in results
    ]
    wins = [False] * count
    active = list(range(count))
    while active:
        obs = np.stack([results[e].observations for e in active])
        q, h_new = net.act(task_id, obs, last[active], h[active])
        h[active] = h_new
        still = []
        for j, e in enumerate(active):
            avail = results[e].available_actions
            acts = [select_action(q[j, i], avail[i], epsilon, rng) for i in range(n)]
            states[e], res = envsuite.step(states[e], acts)
            results[e] = res
            last[e] = acts
            r = rec[e]
            r["act"].append(acts)
            r["rew"].append(res.reward)
            r["term"].append(res.terminated)
            r["obs"].append(res.observations)
            r["state"].append(res.global_state)
            r["avail"].append(res.available_actions)
            if res.terminated:
                wins[e] = res.win
            else:
                still.append(e)
        active = still
    return [
        Episode(
            task_id=task_id,
            obs=np.stack(r["obs"]),
            state=np.stack(r["state"]),
            avail=np.stack(r["avail"]),
            actions=np.array(r["act"], dtype=np.int64),
            reward=np.array(r["rew"], dtype=np.float32),
            terminated=np.array(r["term"], dtype=bool),
            win=wins[e],
        )
        for e, r in enumerate(rec)
    ]


def collect_episode(net: ApnNet, task_id: str, epsilon: float, rng: np.random.Generator, seed: int) -> Episode:
    return run_episodes(net, task_id, [seed], epsilon, rng)[0]


def evaluate(net: ApnNet, task_id: str, n_episodes: int, seed: int) -> tuple[float, float]:
    """Greedy play on seeds ``seed .. seed + n - 1``; returns (win rate, mean return)."""
    if n_episodes < 1:
        raise UsageError("evaluation needs at least one episode")
    episodes = run_episodes(net, task_id, range(seed, seed + n_episodes), 0.0, None)
    wins = sum(e.win for e in episodes)
    return wins / n_episodes, float(np.mean([e.episode_return for e in episodes]))


# ---------------------------------------------------------------------------
# losses


def _trunk_inputs(spec: TaskSpec, batch: Batch) -> np.ndarray:
    """Time-major trunk inputs ``[L_max + 1, B, N, in]``."""
    obs = np.swapaxes(batch.obs, 0, 1)
    last = np.full(obs.shape[:-1], -1, dtype=np.int64)
    last[1:] = np.swapaxes(batch.actions, 0, 1)
    return perl_inputs(spec, obs, last)


def _real_rows(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    t_idx, b_idx = np.nonzero(batch.filled.T)
    return t_idx, b_idx


def td_targets(batch: Batch, target_net: ApnNet, gamma: float, inputs: np.ndarray | None = None) -> np.ndarray:
    """``y[b, t] = r + gamma * (1 - terminated) * mix_target(max_k Q_target(t + 1))``; padded steps are 0."""
    task_id = batch.task_id
    spec = target_net.tasks[task_id]
    if inputs is None:
        inputs = _trunk_inputs(spec, batch)
    t_idx, b_idx = _real_rows(batch)
    y = np.zeros(batch.filled.shape, dtype=np.float32)
    reward = batch.reward[b_idx, t_idx]
    boot = ~batch.terminated[b_idx, t_idx]
    values = reward.astype(np.float32)
    if gamma > 0 and boot.any():
        nt, nb = t_idx[boot] + 1, b_idx[boot]
        q_next = target_net.q_rows(task_id, inputs, (nt, nb)).value
        masked = np.where(batch.avail[nb, nt], q_next, -np.inf)
        best = masked.max(axis=-1)
        mixer = target_net.mixers[task_id]
        q_tot = mixer.forward_numpy(best, batch.state[nb, nt])
        values[boot] += gamma * q_tot
    y[b_idx, t_idx] = values
    return y


def task_loss(batch: Batch, net: ApnNet, y: np.ndarray, tape: Tape | None = None, inputs: np.ndarray | None = None) -> Var:
    """Mean squared TD error over real steps, mixing the Q of the action taken."""
    task_id = batch.task_id
    spec = net.tasks[task_id]
    if inputs is None:
        inputs = _trunk_inputs(spec, batch)
    t_idx, b_idx = _real_rows(batch)
    taken = net.q_rows(task_id, inputs[: batch.max_len], (t_idx, b_idx), tape, batch.actions[b_idx, t_idx])
    state = nn.const(batch.state[b_idx, t_idx])
    q_tot = net.mixers[task_id](taken, state, tape)
    err = nn.sub(q_tot, nn.const(y[b_idx, t_idx]), tape)
    total = nn.sum_(nn.square(err, tape), tape=tape)
    return nn.mul(total, nn.const(1.0 / len(t_idx)), tape)


def combined_step(
    losses: list[Var],
    weights: list[float],
    tape: Tape,
    opt: RMSprop,
    grad_clip: float | None = None,
    task_ids: list[str] | None = None,
) -> float:
    """``total = sum_i w_i * loss_i``; one backward pass and one optimizer update."""
    for i, loss in enumerate(losses):
        if not np.isfinite(loss.value):
            who = task_ids[i] if task_ids else str(i)
            raise NonFiniteError(f"non-finite loss for task {who}")
    total = weighted_total(losses, weights, tape)
    tape.backward(total)
    if grad_clip is not None:
        nn.clip_grad_norm(opt.params, grad_clip)
    opt.step()
    return float(total.value)


def weighted_total(losses: list[Var], weights: list[float], tape: Tape | None) -> Var:
    total = None
    for loss, w in zip(losses, weights):
        term = nn.mul(loss, nn.const(w, dtype=loss.value.dtype), tape)
        total = term if total is None else nn.add(total, term, tape)
    return total


# ---------------------------------------------------------------------------
# the run loop


@dataclass
class MetricsRow:
    run_id: str
    mode: str
    arch: str
    mixer: str
    task: str
    env_steps: int
    train_steps: int
    eval_win_rate: float
    eval_return: float
    loss: float
    omega: float
    epsilon: float

    def csv_fields(self) -> list[str]:
        return [
            self.run_id,
            self.mode,
            self.arch,
            self.mixer,
            self.task,
            str(self.env_steps),
            str(self.train_steps),
            f"{self.eval_win_rate:.6f}",
            f"{self.eval_return:.6f}",
            "nan" if math.isnan(self.loss) else f"{self.loss:.6g}",
            f"{self.omega:.6f}",
            f"{self.epsilon:.6f}",
        ]


@dataclass
class RunResult:
    config: TrainConfig
    net: ApnNet
    rows: list[MetricsRow]
    env_steps: dict[str, int]
    train_steps: int
    checkpoint_meta: dict = field(default_factory=dict)

    def decl_checkpoint(self) -> Checkpoint:
        arrays = {p.name: p.value.copy() for p in self.net.component_params("decl")}
        return Checkpoint(arrays=arrays, meta=dict(self.checkpoint_meta))


def _stream(config: TrainConfig, purpose: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, purpose])


EVAL_SEED_BASE = 1_000_000_007


class Trainer:
    """Holds the state of one run; ``run()`` drives it to the step budget."""

    def __init__(self, config: TrainConfig, on_row: Callable[[MetricsRow], None] | None = None):
        config.validate()
        self.config = config
        self.on_row = on_row
        self.specs = [task_from_name(t) for t in config.tasks]
        self.task_ids = [s.task_id for s in self.specs]
        self.net = ApnNet(d=config.d, arch=config.arch, seed=int(_stream(config, 0).integers(2**31)))
        for spec in self.specs:
            self.net.add_task(spec, config.mixer)
        self.loaded_meta: dict = {}
        if config.mode.startswith("transfer"):
            self.loaded_meta = load_checkpoint(config.checkpoint, self.net)
            if config.mode == "transfer_fix":
                self.net.freeze("decl")
        self.target = sync_target(self.net)
        self.opt = RMSprop(self.net.params(), lr=config.lr)
        self.buffers = {t: ReplayBuffer(t, config.buffer_capacity) for t in self.task_ids}
        self.tracker = EmTracker(self.task_ids)
        self.env_steps = {t: 0 for t in self.task_ids}
        self.train_steps = 0
        self.rows: list[MetricsRow] = []
        self._losses: dict[str, list[float]] = {t: [] for t in self.task_ids}
        self._act_rng = _stream(config, 1)
        self._env_rng = _stream(config, 2)
        self._replay_rng = _stream(config, 3)
        self.eval_seed = EVAL_SEED_BASE + 1000 * config.seed

    @property
    def budget(self) -> int:
        return self.config.total_env_steps * len(self.task_ids)

    def collect(self, task_id: str) -> Episode:
        eps = epsilon_at(self.config, self.env_steps[task_id])
        seed = int(self._env_rng.integers(2**62))
        episode = collect_episode(self.net, task_id, eps, self._act_rng, seed)
        self.buffers[task_id].push(episode)
        self.env_steps[task_id] += len(episode)
        return episode

    def ready(self) -> bool:
        return all(b.ready(self.config.batch) for b in self.buffers.values())

    def train_step(self) -> float:
        cfg = self.config
        tape = Tape()
        losses = []
        weights = []
        for tid in self.task_ids:
            batch = self.buffers[tid].sample(cfg.batch, self._replay_rng)
            inputs = _trunk_inputs(self.net.tasks[tid], batch)
            y = td_targets(batch, self.target, cfg.gamma, inputs)
            loss = task_loss(batch, self.net, y, tape, inputs)
            losses.append(loss)
            weights.append(self.tracker.weights[tid])
            self._losses[tid].append(float(loss.value))
        total = combined_step(losses, weights, tape, self.opt, cfg.grad_clip, self.task_ids)
        self.train_steps += 1
        if self.train_steps % cfg.target_sync == 0:
            sync_target(self.net, self.target)
        return total

    def evaluate_all(self) -> list[MetricsRow]:
        cfg = self.config
        results = {}
        for tid in self.task_ids:
            results[tid] = evaluate(self.net, tid, cfg.eval_episodes, self.eval_seed)
            self.tracker.update(tid, results[tid][0])
        rows = []
        for tid in self.task_ids:
            recent = self._losses[tid]
            row = MetricsRow(
                run_id=cfg.run_id,
                mode=cfg.mode,
                arch=cfg.arch,
                mixer=cfg.mixer,
                task=tid,
                env_steps=self.env_steps[tid],
                train_steps=self.train_steps,
                eval_win_rate=results[tid][0],
                eval_return=results[tid][1],
                loss=float(np.mean(recent)) if recent else float("nan"),
                omega=self.tracker.weights[tid],
                epsilon=epsilon_at(cfg, self.env_steps[tid]),
            )
            self._losses[tid] = []
            rows.append(row)
            if self.on_row is not None:
                self.on_row(row)
        self.rows.extend(rows)
        return rows

    def iterate(self) -> Iterator[list[MetricsRow]]:
        """Run to the budget, yielding the rows of each evaluation point."""
        cfg = self.config
        n_tasks = len(self.task_ids)
        yield self.evaluate_all()
        next_eval = cfg.eval_interval * n_tasks
        evaluated_at = 0
        while sum(self.env_steps.values()) < self.budget:
            for tid in self.task_ids:
                self.collect(tid)
            if self.ready():
                self.train_step()
            total = sum(self.env_steps.values())
            if total >= next_eval:
                while next_eval <= total:
                    next_eval += cfg.eval_interval * n_tasks
                evaluated_at = total
                yield self.evaluate_all()
        if evaluated_at != sum(self.env_steps.values()):
            yield self.evaluate_all()

    def run(self) -> RunResult:
        for rows in self.iterate():
            for row in rows:
                log.info(
                    "%s %s env=%d train=%d win=%.3f omega=%.3f eps=%.3f",
                    row.run_id, row.task, row.env_steps, row.train_steps,
                    row.eval_win_rate, row.omega, row.epsilon,
                )
        meta = {
            "task_ids": list(self.task_ids),
            "step": self.train_steps,
            "env_steps": dict(self.env_steps),
            "seed": self.config.seed,
            "d": self.config.d,
            "mode": self.config.mode,
            "single_task": len(self.task_ids) == 1,
        }
        return RunResult(
            config=self.config,
            net=self.net,
            rows=list(self.rows),
            env_steps=dict(self.env_steps),
            train_steps=self.train_steps,
            checkpoint_meta=meta,
        )


def train(config: TrainConfig, on_row=None) -> RunResult:
    return Trainer(config, on_row).run()


def pretrain(config: TrainConfig, on_row=None) -> tuple[Checkpoint, RunResult]:
    """Multi-task pre-training; returns the DecL checkpoint and the run."""
    if config.mode != "pretrain":
        config = replace(config, mode="pretrain")
    if len(config.tasks) < 2:
        log.warning("single-task pre-training: flagged in checkpoint metadata")
    result = train(config, on_row)
    return result.decl_checkpoint(), result


def transfer_train(config: TrainConfig, on_row=None) -> RunResult:
    if config.mode not in ("transfer_fix", "transfer_finetune"):
        raise ConfigError(f"transfer_train needs a transfer mode, got {config.mode!r}")
    return train(config, on_row)
