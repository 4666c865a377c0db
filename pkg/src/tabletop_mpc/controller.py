"""Receding-horizon loop: sample, predict, track, score, execute the first action."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from . import cost as costs
from .core import (ACTION_DIM, ZERO_ACTION, EpisodeLog, Frame, Goal, RunConfig, StepRecord,
                   append_step, split_rngs)
from .predictor import PredictionContext, WarpPredictor, make_predictor
from .sampler import SamplingMean, blend_means, hint_to_mean, sample_candidates
from .sim import Tabletop, TaskSpec
from .tracker import TemplateTracker
from .vlm import RemoteVLM, ScriptedVLM

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControllerState:
    t: int
    mu_sub: SamplingMean
    prev_frames: tuple  # (O_{t-2}, O_{t-1}) relative to the next observation
    prev_actions: tuple  # (a_{t-1}, a_t), the last two executed actions
    degraded: bool = False

    @classmethod
    def initial(cls, obs: Frame) -> "ControllerState":
        ts = obs.timestamp
        dup = (Frame(obs.pixels, ts - 2), Frame(obs.pixels, ts - 1))
        return cls(0, SamplingMean.zeros("sub"), dup, (ZERO_ACTION, ZERO_ACTION))


@dataclass
class Deps:
    vlm: Any
    predictor: Any
    tracker: Any
    rng: np.random.Generator
    pixel_cost: Callable = costs.pixel_cost
    vlm_cost: Callable = costs.vlm_cost
    dump_dir: Optional[str] = None
    episode: int = 0


def make_deps(sim: Tabletop, cfg: RunConfig, vlm=None, dump_dir: Optional[str] = None, episode: int = 0) -> Deps:
    rngs = split_rngs(cfg.seed)
    if vlm is None:
        if cfg.vlm_kind == "oracle":
            vlm = ScriptedVLM(sim, cfg.deadband)
        else:
            vlm = RemoteVLM(retries=cfg.vlm_retries)
    pred_seed = int(rngs["predictor"].integers(2**32))
    predictor = make_predictor(cfg.predictor_kind, sim, cfg.noise_std, pred_seed)
    tracker = TemplateTracker(cfg.search_window, cfg.ncc_threshold)
    return Deps(vlm, predictor, tracker, rngs["sampler"], dump_dir=dump_dir, episode=episode)


def forced_switch(cfg: RunConfig) -> Optional[float]:
    return {"pd": 1.0, "vs": 0.0}.get(cfg.ablation_mode)


def _dump(deps: Deps, t: int, video) -> None:
    from PIL import Image

    os.makedirs(deps.dump_dir, exist_ok=True)
    for k, f in enumerate(video.frames):
        name = f"ep{deps.episode}_t{t}_cand{video.candidate_id}_tau{k}.png"
        Image.fromarray(f.pixels).save(os.path.join(deps.dump_dir, name))


def control_step(cs: ControllerState, obs: Frame, goal: Goal, cfg: RunConfig, deps: Deps, aux=None):
    """One planning step; returns (action, next controller state, step record)."""
    t0 = time.perf_counter()
    fallbacks0 = getattr(deps.vlm, "fallbacks", 0)

    hint = deps.vlm.query_direction(obs, goal, aux)
    if cfg.ablation_mode == "rs":
        mu = SamplingMean.zeros("blended")
    else:
        mu = blend_means(hint_to_mean(hint, cfg.w_m, cfg.w_r), cs.mu_sub, cfg.w_VLM, cfg.w_sub)
    cands = sample_candidates(mu, cfg.N, cfg.T, cfg.sigma_array, deps.rng, cfg.d_max, cfg.r_max)

    w_D = forced_switch(cfg)
    if w_D is None:
        w_D = deps.vlm.query_switch(obs, goal, aux).w_D
    if goal.kind != "image":
        if w_D > 0 and cfg.ablation_mode == "pd":
            raise ValueError("pixel-only scoring needs a goal image")
        w_D = 0.0

    need_boxes = w_D < 1.0 or isinstance(deps.predictor, WarpPredictor)
    boxes = deps.vlm.query_boxes(obs, goal, aux) if need_boxes else None

    ctx = PredictionContext(
        prev=Frame(cs.prev_frames[1].pixels, obs.timestamp - 1),
        curr=obs,
        a_prev=cs.prev_actions[0],
        a_curr=cs.prev_actions[1],
        aux=aux,
        ee_box=boxes.e if boxes is not None else None,
    )
    videos = deps.predictor.predict_batch(ctx, cands)

    n = len(cands)
    c_pix = np.zeros(n)
    c_vlm = np.zeros(n)
    if w_D > 0:
        c_pix = np.array([deps.pixel_cost(v, goal.image) for v in videos])
    if w_D < 1:
        c_vlm = np.array([deps.vlm_cost(deps.tracker.track(v, boxes, obs)) for v in videos])
    reports = costs.combine(c_pix, c_vlm, w_D)
    best = costs.select_best(reports)
    winner = cands[best]
    action = winner.actions[0]

    rest = winner.as_array()[1:]
    mu_sub = SamplingMean(rest.mean(axis=0) if len(rest) else np.zeros(ACTION_DIM), "sub")
    degraded = getattr(deps.vlm, "fallbacks", 0) != fallbacks0

    if deps.dump_dir is not None:
        _dump(deps, cs.t, videos[best])

    new_cs = ControllerState(
        t=cs.t + 1,
        mu_sub=mu_sub,
        prev_frames=(cs.prev_frames[1], obs),
        prev_actions=(cs.prev_actions[1], action),
        degraded=degraded,
    )
    record = StepRecord(
        step=cs.t,
        obs_digest=obs.digest(),
        mu=tuple(float(v) for v in mu.mu),
        chosen=best,
        action=tuple(float(v) for v in action.as_array()),
        costs=tuple(r.summary() for r in reports),
        w_D=float(w_D),
        duration_ms=(time.perf_counter() - t0) * 1e3,
        degraded=degraded,
    )
    return action, new_cs, record


def _error_record(t: int, obs: Frame) -> StepRecord:
    return StepRecord(t, obs.digest(), (0.0,) * ACTION_DIM, -1, (0.0,) * ACTION_DIM, (), 0.0, end="error")


def run_episode(task: TaskSpec, cfg: RunConfig, deps: Optional[Deps] = None, log_path: Optional[str] = None,
                sim: Optional[Tabletop] = None, goal_kind: str = "image") -> EpisodeLog:
    sim = sim or Tabletop.from_config(task, cfg)
    deps = deps or make_deps(sim, cfg)
    state, obs = sim.reset(cfg.seed)
    goal = Goal.from_image(sim.goal_image(state)) if goal_kind == "image" else task.goal
    cs = ControllerState.initial(obs)
    if log_path is not None and os.path.exists(log_path):
        os.remove(log_path)
    episode = EpisodeLog(path=log_path)
    for t in range(cfg.T_max):
        try:
            action, cs, rec = control_step(cs, obs, goal, cfg, deps, aux=state)
        except Exception:
            log.exception("control step %d failed", t)
            append_step(episode, _error_record(t, obs).with_end("error", task.reward(state)))
            break
        state = sim.step(state, action)
        obs = sim.render(state)
        if task.success(state):
            end = "success"
        elif state.violation:
            end = "failure"
        elif t == cfg.T_max - 1:
            end = "budget_exhausted"
        else:
            end = None
        append_step(episode, rec.with_end(end, task.reward(state)))
        if end is not None:
            break
    return episode


def episode_stats(episode: EpisodeLog) -> dict:
    return {
        "success": episode.success,
        "steps": len(episode),
        "end": episode.end_signal,
        "duration_ms": sum(r.duration_ms for r in episode.records),
        "violation": episode.end_signal == "failure",
    }
