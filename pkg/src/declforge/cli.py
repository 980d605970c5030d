"""Command line entry point: config parsing, run subcommands and reports.

Usage::

    declforge pretrain|transfer|train|eval --config run.ini [--seed N] [--out DIR]
    declforge report metrics.csv [more.csv ...] --out DIR

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import trainer
from .apnnet import net_from_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, DeclforgeError, NonFiniteError, UsageError

log = logging.getLogger("declforge")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
OUT_ENV = "DECLFORGE_OUT"

METRICS_FILE = "metrics.csv"
DECL_FILE = "decl.apnc"
FULL_FILE = "full.apnc"
EVAL_FILE = "eval.csv"

# section -> key -> converter
SCHEMA: dict[str, dict] = {
    "run": {"seed": int, "total_env_steps": int, "out_dir": str, "name": str},
    "model": {"d": int, "arch": str, "mixer": str},
    "train": {
        "lr": float,
        "gamma": float,
        "batch": int,
        "target_sync": int,
        "epsilon_start": float,
        "epsilon_end": float,
        "epsilon_anneal_steps": int,
        "eval_interval": int,
        "eval_episodes": int,
        "buffer_capacity": int,
        "grad_clip": float,
    },
    "tasks": {"names": str},
    "transfer": {"checkpoint": str, "mode": str},
}
REQUIRED = {"run": ("total_env_steps",), "tasks": ("names",)}
TRANSFER_MODES = {"fix": "transfer_fix", "finetune": "transfer_finetune"}


@dataclass
class RunConfig:
    """A parsed config file; ``train`` holds everything the trainer needs."""

    path: Path
    train: trainer.TrainConfig
    out_dir: Path | None = None
    sections: dict[str, dict] = field(default_factory=dict)


def parse_config(path, subcommand: str = "train") -> RunConfig:
    """Read an INI file, reject unknown sections or keys and check required ones."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            conv = SCHEMA[section].get(key)
            if conv is None:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                values[section][key] = conv(raw.strip())
            except ValueError:
                raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {conv.__name__}") from None

    required = dict(REQUIRED)
    if subcommand == "transfer":
        required["transfer"] = ("checkpoint", "mode")
    for section, keys in required.items():
        if section not in values:
            raise ConfigError(f"missing section [{section}]")
        for key in keys:
            if key not in values[section]:
                raise ConfigError(f"missing key {key!r} in section [{section}]")

    run = values.get("run", {})
    model = values.get("model", {})
    tasks = [t for t in values["tasks"]["names"].replace(",", " ").split() if t]
    if not tasks:
        raise ConfigError("section [tasks] lists no task")
    mode = {"pretrain": "pretrain", "train": "scratch", "eval": "scratch"}.get(subcommand)
    checkpoint = None
    if subcommand == "transfer":
        tr = values["transfer"]
        mode = TRANSFER_MODES.get(tr["mode"], tr["mode"])
        if mode not in TRANSFER_MODES.values():
            raise ConfigError(f"[transfer] mode must be fix or finetune, got {tr['mode']!r}")
        checkpoint = str((path.parent / tr["checkpoint"]).resolve())
    kwargs = dict(values.get("train", {}))
    config = trainer.TrainConfig(
        tasks=tasks,
        arch=model.get("arch", "apn"),
        mixer=model.get("mixer", "vdn"),
        mode=mode,
        d=model.get("d", 64),
        total_env_steps=run["total_env_steps"],
        seed=run.get("seed", 0),
        checkpoint=checkpoint,
        name=run.get("name"),
        **kwargs,
    )
    out_dir = Path(run["out_dir"]) if "out_dir" in run else None
    if out_dir is not None and not out_dir.is_absolute():
        out_dir = path.parent / out_dir
    return RunConfig(path=path, train=config, out_dir=out_dir, sections=values)


def resolve_out(cfg: RunConfig | None, out: str | None) -> Path:
    """``--out`` beats the config's ``out_dir``, which beats ``$DECLFORGE_OUT``."""
    if out:
        return Path(out)
    if cfg is not None and cfg.out_dir is not None:
        return cfg.out_dir
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    raise UsageError(f"no output directory: pass --out, set [run] out_dir or ${OUT_ENV}")


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def metrics_csv(rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(trainer.METRICS_HEADER)
    for row in rows:
        writer.writerow(row.csv_fields())
    return buf.getvalue().encode("utf-8")


def _save_run(result: trainer.RunResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_atomic(out_dir / METRICS_FILE, metrics_csv(result.rows))
    meta = dict(result.checkpoint_meta)
    for scope, name in (("decl", DECL_FILE), ("full", FULL_FILE)):
        tmp = out_dir / (name + ".tmp")
        save_checkpoint(result.net, tmp, scope=scope, **{k: v for k, v in meta.items() if k != "d"})
        os.replace(tmp, out_dir / name)


def _prepare(args, subcommand: str) -> tuple[RunConfig, Path]:
    cfg = parse_config(args.config, subcommand)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if subcommand == "eval":
        for name in cfg.train.tasks:
            trainer.task_from_name(name)
    else:
        cfg.train.validate()
    if cfg.train.checkpoint and not Path(cfg.train.checkpoint).is_file():
        raise ConfigError(f"checkpoint {cfg.train.checkpoint} does not exist")
    return cfg, resolve_out(cfg, args.out)


def cmd_pretrain(args) -> int:
    cfg, out_dir = _prepare(args, "pretrain")
    _, result = trainer.pretrain(cfg.train)
    _save_run(result, out_dir)
    print(f"pretrained {len(result.config.tasks)} task(s); DecL written to {out_dir / DECL_FILE}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg, out_dir = _prepare(args, "transfer")
    result = trainer.transfer_train(cfg.train)
    _save_run(result, out_dir)
    print(f"{cfg.train.mode} on {cfg.train.tasks[0]}; metrics in {out_dir / METRICS_FILE}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out_dir = _prepare(args, "train")
    result = trainer.train(cfg.train)
    _save_run(result, out_dir)
    print(f"trained {cfg.train.arch}-{cfg.train.mixer} on {cfg.train.tasks[0]}; metrics in {out_dir / METRICS_FILE}")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Greedy evaluation of a full checkpoint on the configured tasks."""
    cfg, out_dir = _prepare(args, "eval")
    ckpt = Path(args.checkpoint) if args.checkpoint else out_dir / FULL_FILE
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    net = net_from_checkpoint(ckpt)
    tc = cfg.train
    seed = trainer.EVAL_SEED_BASE + 1000 * tc.seed
    lines = ["task,episodes,seed,eval_win_rate,eval_return"]
    for name in tc.tasks:
        spec = trainer.task_from_name(name)
        if spec.task_id not in net.tasks:
            raise ConfigError(f"checkpoint {ckpt} has no perception layer for {spec.task_id}")
        win, ret = trainer.evaluate(net, spec.task_id, tc.eval_episodes, seed)
        lines.append(f"{spec.task_id},{tc.eval_episodes},{seed},{win:.6f},{ret:.6f}")
    text = "\n".join(lines) + "\n"
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_atomic(out_dir / EVAL_FILE, text.encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# reports


@dataclass
class Curve:
    run_id: str
    steps: list[int]
    wins: list[float]

    def auc(self) -> float:
        """Trapezoidal area under win rate over env steps."""
        if len(self.steps) < 2:
            return 0.0
        s = np.asarray(self.steps, dtype=np.float64)
        w = np.asarray(self.wins, dtype=np.float64)
        return float(np.sum((s[1:] - s[:-1]) * (w[1:] + w[:-1]) / 2))

    def auc_normalized(self) -> float:
        """Area divided by the step range: the time-averaged win rate, in [0, 1]."""
        span = self.steps[-1] - self.steps[0] if self.steps else 0
        if span <= 0:
            return float(self.wins[-1]) if self.wins else 0.0
        return self.auc() / span


@dataclass
class GroupSummary:
    group: str
    task: str
    seeds: int
    final_mean: float
    final_min: float
    final_max: float
    auc: float
    auc_normalized: float


class MalformedCsv(ConfigError):
    pass


def group_label(run_id: str) -> str:
    """Run id without its ``-seed<N>`` suffix."""
    head, sep, tail = run_id.rpartition("-seed")
    return head if sep and tail.isdigit() else run_id


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV strictly; errors name the file and row."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != trainer.METRICS_HEADER:
        raise MalformedCsv(f"{path}: row 1: header does not match the metrics schema")
    rows = []
    ints = ("env_steps", "train_steps")
    floats = ("eval_win_rate", "eval_return", "loss", "omega", "epsilon")
    for lineno, fields in enumerate(reader, start=2):
        if not fields:
            continue
        if len(fields) != len(header):
            raise MalformedCsv(f"{path}: row {lineno}: expected {len(header)} fields, got {len(fields)}")
        rec = dict(zip(header, fields))
        try:
            for k in ints:
                rec[k] = int(rec[k])
            for k in floats:
                rec[k] = float(rec[k])
        except ValueError:
            raise MalformedCsv(f"{path}: row {lineno}: non-numeric value") from None
        if not 0.0 <= rec["eval_win_rate"] <= 1.0:
            raise MalformedCsv(f"{path}: row {lineno}: eval_win_rate outside [0, 1]")
        rows.append(rec)
    if not rows:
        raise MalformedCsv(f"{path}: no data rows")
    return rows


def collect_curves(rows: list[dict]) -> dict[tuple[str, str], list[Curve]]:
    """Group rows into per-seed curves keyed by (run group, task)."""
    curves: dict[tuple[str, str, str], Curve] = {}
    for rec in rows:
        key = (group_label(rec["run_id"]), rec["task"], rec["run_id"])
        curve = curves.setdefault(key, Curve(rec["run_id"], [], []))
        curve.steps.append(rec["env_steps"])
        curve.wins.append(rec["eval_win_rate"])
    groups: dict[tuple[str, str], list[Curve]] = {}
    for (group, task, _), curve in curves.items():
        groups.setdefault((group, task), []).append(curve)
    return groups


def summarize(groups: dict[tuple[str, str], list[Curve]]) -> list[GroupSummary]:
    out = []
    for (group, task), curves in groups.items():
        finals = [c.wins[-1] for c in curves]
        out.append(
            GroupSummary(
                group=group,
                task=task,
                seeds=len(curves),
                final_mean=float(np.mean(finals)),
                final_min=float(np.min(finals)),
                final_max=float(np.max(finals)),
                auc=float(np.mean([c.auc() for c in curves])),
                auc_normalized=float(np.mean([c.auc_normalized() for c in curves])),
            )
        )
    return out


def summary_table(summaries: list[GroupSummary]) -> str:
    lines = ["group,task,seeds,final_mean,final_min,final_max,auc,auc_normalized"]
    for s in summaries:
        lines.append(
            f"{s.group},{s.task},{s.seeds},{s.final_mean:.6f},{s.final_min:.6f},"
            f"{s.final_max:.6f},{s.auc:.6f},{s.auc_normalized:.6f}"
        )
    return "\n".join(lines) + "\n"


def mean_curve(curves: list[Curve]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mean, min and max win rate per evaluation index (truncated to the shortest seed)."""
    n = min(len(c.steps) for c in curves)
    steps = np.mean([c.steps[:n] for c in curves], axis=0)
    wins = np.array([c.wins[:n] for c in curves])
    return steps, wins.mean(axis=0), wins.min(axis=0), wins.max(axis=0)


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def render_svg(groups: dict[tuple[str, str], list[Curve]], width: int = 720, height: int = 420) -> str:
    """Plain SVG line chart: one mean line and min/max band per group."""
    left, right, top, bottom = 60, 220, 20, 50
    pw, ph = width - left - right, height - top - bottom
    x_max = max((max(c.steps) for cs in groups.values() for c in cs), default=1) or 1

    def px(x, y):
        return left + pw * x / x_max, top + ph * (1 - y)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for tick in range(6):
        y = tick / 5
        _, yy = px(0, y)
        parts.append(f'<text x="{left - 6}" y="{yy + 4:.1f}" text-anchor="end">{y:.1f}</text>')
        xx, _ = px(x_max * tick / 5, 0)
        parts.append(f'<text x="{xx:.1f}" y="{top + ph + 16}" text-anchor="middle">{int(x_max * tick / 5)}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">env steps</text>')
    parts.append(f'<text x="14" y="{top + ph / 2}" transform="rotate(-90 14 {top + ph / 2})" text-anchor="middle">win rate</text>')
    for i, ((group, task), curves) in enumerate(sorted(groups.items())):
        color = PALETTE[i % len(PALETTE)]
        steps, mean, lo, hi = mean_curve(curves)
        band = [px(x, y) for x, y in zip(steps, hi)] + [px(x, y) for x, y in zip(steps[::-1], lo[::-1])]
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in band)
        parts.append(f'<polygon class="band" points="{pts}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (px(a, b) for a, b in zip(steps, mean)))
        parts.append(f'<polyline class="series" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 14 + 16 * i
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 34}" y="{ly}">{_escape(group)} ({_escape(task)})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def report(paths, out_dir) -> list[GroupSummary]:
    """Write ``summary.csv`` and ``curves.svg`` into ``out_dir``; returns the summaries."""
    if not paths:
        raise UsageError("report needs at least one metrics CSV")
    rows = [rec for p in paths for rec in read_metrics(p)]
    groups = collect_curves(rows)
    summaries = summarize(groups)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_atomic(out_dir / "summary.csv", summary_table(summaries).encode("utf-8"))
    _write_atomic(out_dir / "curves.svg", render_svg(groups).encode("utf-8"))
    return summaries


def cmd_report(args) -> int:
    out_dir = resolve_out(None, args.out)
    summaries = report(args.csv, out_dir)
    sys.stdout.write(summary_table(summaries))
    return EXIT_OK


# ---------------------------------------------------------------------------
# dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="declforge", description="Transferable decision layers for cooperative multi-agent RL.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at every evaluation point")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "pretrain": (cmd_pretrain, "multi-task pre-training of a shared decision layer"),
        "transfer": (cmd_transfer, "train a new task on a pre-trained decision layer"),
        "train": (cmd_train, "single-task training from scratch"),
        "eval": (cmd_eval, "greedy evaluation of a saved network"),
    }
    for name, (func, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None, help=f"output directory (default: [run] out_dir, then ${OUT_ENV})")
        if name == "eval":
            p.add_argument("--checkpoint", default=None, help=f"full checkpoint (default: OUT/{FULL_FILE})")
        p.set_defaults(func=func)
    p = sub.add_parser("report", help="summary table and SVG chart from metrics CSVs")
    p.add_argument("csv", nargs="+", help="metrics CSV files")
    p.add_argument("--config", default=None, help=argparse.SUPPRESS)
    p.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV})")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, DeclforgeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
