"""Seeded episode sweeps and their metrics table."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .controller import episode_stats, run_episode
from .core import RunConfig
from .sim import load_task

log = logging.getLogger(__name__)

CSV_COLUMNS = ("task", "variant", "success_rate", "mean_steps", "mean_duration")


@dataclass(frozen=True)
class EpisodeResult:
    task: str
    variant: str
    seed: int
    success: bool
    steps: int
    duration_ms: float
    end: str
    violation: bool


def run_one(task_name: str, cfg: RunConfig, seed: int) -> EpisodeResult:
    cfg = cfg.replace(seed=seed, task_name=task_name)
    try:
        ep = run_episode(load_task(task_name), cfg)
        st = episode_stats(ep)
    except Exception:  # a broken episode is data, the sweep goes on
        log.exception("episode %s/%s seed %d crashed", task_name, cfg.ablation_mode, seed)
        st = {"success": False, "steps": 0, "duration_ms": 0.0, "end": "error", "violation": False}
    return EpisodeResult(task_name, cfg.ablation_mode, seed, st["success"], st["steps"], st["duration_ms"],
                         st["end"] or "error", st["violation"])


def _job(args):
    return run_one(*args)


def sweep(cfg: RunConfig, tasks: Sequence[str], variants: Sequence[str], seeds: Sequence[int],
          workers: int = 1) -> list:
    jobs = [(t, cfg.replace(ablation_mode=v), s) for t in tasks for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_job, jobs))
    return [_job(j) for j in jobs]


def summarize(results: Sequence[EpisodeResult]) -> list:
    """One row per (task, variant), in first-seen order."""
    keys = []
    for r in results:
        if (r.task, r.variant) not in keys:
            keys.append((r.task, r.variant))
    rows = []
    for task, variant in keys:
        rs = [r for r in results if r.task == task and r.variant == variant]
        rows.append({
            "task": task,
            "variant": variant,
            "success_rate": float(np.mean([r.success for r in rs])),
            "mean_steps": float(np.mean([r.steps for r in rs])),
            "mean_duration": float(np.mean([r.duration_ms for r in rs])) / 1e3,
            "violation_rate": float(np.mean([r.violation for r in rs])),
        })
    return rows


def to_csv(rows, include_duration: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        row = dict(row)
        if not include_duration:
            row["mean_duration"] = ""
        else:
            row["mean_duration"] = f"{row['mean_duration']:.4f}"
        row["success_rate"] = f"{row['success_rate']:.4f}"
        row["mean_steps"] = f"{row['mean_steps']:.2f}"
        writer.writerow(row)
    return buf.getvalue()


def parse_seeds(raw: Optional[str], episodes: int, base: int = 0) -> list:
    """Explicit comma list (ranges as a-b) or ``episodes`` consecutive seeds from ``base``."""
    if not raw:
        return list(range(base, base + episodes))
    seeds = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds
