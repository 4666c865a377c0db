"""Command-line entry point: single episodes, seeded sweeps and dataset recording."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Optional, Sequence

from PIL import Image

from .bench import parse_seeds, summarize, sweep, to_csv
from .controller import episode_stats, make_deps, run_episode
from .core import ABLATION_MODES, Action, ConfigError, RunConfig, load_config, parse_config, save_config
from .sampler import clamp_raw, hint_to_mean
from .sim import PlacementError, Tabletop, UnknownTaskError, load_task
from .vlm import ScriptedVLM

log = logging.getLogger("tabletop_mpc")


def _overrides(pairs: Sequence[str]) -> dict:
    """``key=value`` strings, coerced through the same parser as config files."""
    if not pairs:
        return {}
    text = "\n".join(p.replace("=", " = ", 1) for p in pairs)
    cfg = parse_config(text)
    keys = {p.split("=", 1)[0].strip() for p in pairs}
    return {k: getattr(cfg, k) for k in keys}


def _config(args, **extra) -> RunConfig:
    over = _overrides(getattr(args, "set", None) or [])
    for flag, key in (("seed", "seed"), ("predictor", "predictor_kind"), ("vlm", "vlm_kind")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    over.update({k: v for k, v in extra.items() if v is not None})
    if args.config:
        return load_config(args.config, **over)
    return RunConfig(**over)


def _run_dir(out: str, seed: int) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(out, f"{stamp}_seed{seed}")
    n = 1
    while os.path.exists(path):
        path = os.path.join(out, f"{stamp}_seed{seed}_{n}")
        n += 1
    os.makedirs(path)
    return path


def cmd_run(args) -> int:
    task = load_task(args.task)
    ablation = args.ablation if args.ablation else None
    cfg = _config(args, ablation_mode=ablation, task_name=task.name)
    run_dir = _run_dir(args.out, cfg.seed)
    save_config(cfg, os.path.join(run_dir, "config.txt"))
    sim = Tabletop.from_config(task, cfg)
    dump = os.path.join(run_dir, "frames") if args.dump_frames else None
    deps = make_deps(sim, cfg, dump_dir=dump)
    log_path = os.path.join(run_dir, "episode.jsonl")
    ep = run_episode(task, cfg, deps=deps, log_path=log_path, sim=sim, goal_kind=args.goal)
    st = episode_stats(ep)
    print(f"task={task.name} seed={cfg.seed} ablation={cfg.ablation_mode} success={st['success']} "
          f"steps={st['steps']} duration={st['duration_ms'] / 1e3:.2f}s end={st['end']}")
    print(f"log: {log_path}")
    return 0


def cmd_bench(args) -> int:
    tasks = [t.strip() for t in args.task.split(",") if t.strip()]
    for t in tasks:
        load_task(t)
    variants = [v.strip() for v in (args.ablation or "full").split(",") if v.strip()]
    for v in variants:
        if v not in ABLATION_MODES:
            raise ConfigError(f"ablation_mode: must be one of {ABLATION_MODES}, got {v!r}")
    if args.episodes < 1 and not args.seeds:
        raise ConfigError("episodes: must be >= 1")
    cfg = _config(args)
    seeds = parse_seeds(args.seeds, args.episodes, base=cfg.seed)
    run_dir = _run_dir(args.out, seeds[0] if seeds else cfg.seed)
    save_config(cfg, os.path.join(run_dir, "config.txt"))
    results = sweep(cfg, tasks, variants, seeds, workers=args.workers)
    rows = summarize(results)
    table = to_csv(rows, include_duration=not args.no_duration)
    with open(os.path.join(run_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    with open(os.path.join(run_dir, "episodes.jsonl"), "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.__dict__) + "\n")
    sys.stdout.write(table)
    print(f"metrics: {os.path.join(run_dir, 'metrics.csv')}")
    return 0


def _record_scripted(task, cfg: RunConfig, ep_dir: str) -> int:
    """Follow the scripted direction hint directly, one frame and one action line per step."""
    sim = Tabletop.from_config(task, cfg)
    vlm = ScriptedVLM(sim, cfg.deadband)
    state, obs = sim.reset(cfg.seed)
    goal = task.goal
    steps = 0
    with open(os.path.join(ep_dir, "actions.jsonl"), "w", encoding="utf-8") as fh:
        for t in range(cfg.T_max):
            hint = vlm.query_direction(obs, goal, state)
            a = clamp_raw(hint_to_mean(hint, cfg.w_m, cfg.w_r).mu, cfg.d_max, cfg.r_max)
            name = f"frame_{t:04d}.png"
            Image.fromarray(obs.pixels).save(os.path.join(ep_dir, name))
            fh.write(json.dumps({"step": t, "frame": name, "action": [float(v) for v in a]}) + "\n")
            state = sim.step(state, Action.from_array(a))
            obs = sim.render(state)
            steps += 1
            if task.success(state) or state.violation:
                break
    return steps


def _record_mpc(task, cfg: RunConfig, ep_dir: str) -> int:
    sim = Tabletop.from_config(task, cfg)
    ep = run_episode(task, cfg, sim=sim, log_path=os.path.join(ep_dir, "episode.jsonl"))
    # replay the executed actions to recover the observation at every step
    state, obs = sim.reset(cfg.seed)
    with open(os.path.join(ep_dir, "actions.jsonl"), "w", encoding="utf-8") as fh:
        for rec in ep.records:
            if rec.end == "error":
                break
            name = f"frame_{rec.step:04d}.png"
            Image.fromarray(obs.pixels).save(os.path.join(ep_dir, name))
            fh.write(json.dumps({"step": rec.step, "frame": name, "action": list(rec.action)}) + "\n")
            state = sim.step(state, Action.from_array(rec.action))
            obs = sim.render(state)
    return len(ep)


def cmd_record(args) -> int:
    task = load_task(args.task)
    cfg = _config(args, task_name=task.name)
    run_dir = _run_dir(args.out, cfg.seed)
    save_config(cfg, os.path.join(run_dir, "config.txt"))
    record = _record_mpc if args.policy == "mpc" else _record_scripted
    for e in range(args.episodes):
        ep_dir = os.path.join(run_dir, f"episode_{e:03d}")
        os.makedirs(ep_dir)
        steps = record(task, cfg.replace(seed=cfg.seed + e), ep_dir)
        log.info("episode %d: %d steps", e, steps)
    print(f"recorded {args.episodes} episodes of {task.name} to {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabletop-mpc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, task_default="push_button"):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--task", default=task_default)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--predictor", choices=("oracle", "warp", "noisy"))
        sp.add_argument("--vlm", choices=("oracle", "remote"))
        sp.add_argument("--out", default="runs")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    run = sub.add_parser("run", help="run one episode")
    common(run)
    run.add_argument("--ablation", choices=ABLATION_MODES)
    run.add_argument("--goal", choices=("image", "instruction"), default="image")
    run.add_argument("--dump-frames", action="store_true", help="save the chosen predicted video each step")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="seeded sweep over tasks and ablation variants")
    common(bench)
    bench.add_argument("--ablation", default="full", help="comma list of variants")
    bench.add_argument("--episodes", type=int, default=30)
    bench.add_argument("--seeds", help="explicit seed list, e.g. 0-29 or 1,5,9")
    bench.add_argument("--workers", type=int, default=1)
    bench.add_argument("--no-duration", action="store_true", help="blank the timing column for diffable output")
    bench.set_defaults(func=cmd_bench)

    rec = sub.add_parser("record", help="record (frame, action) episodes")
    common(rec)
    rec.add_argument("--episodes", type=int, default=20)
    rec.add_argument("--policy", choices=("scripted", "mpc"), default="scripted")
    rec.set_defaults(func=cmd_record)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UnknownTaskError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
    except (ConfigError, PlacementError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
