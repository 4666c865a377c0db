"""Action-conditioned future-frame prediction.

Every predictor exposes ``predict(ctx, seq) -> PredictedVideo`` and
``predict_batch(ctx, cands)``.  Frame ``k`` of a prediction is the scene after
executing the first ``k + 1`` actions of the sequence and depends on nothing
else than the context and those actions.

A learned predictor conditions on the two most recent frames and actions.  The
usual encoding broadcasts each 7-vector action over the image plane and
concatenates it channelwise with both frames (``broadcast_actions``), then
rolls the model forward one action at a time, feeding each predicted frame
back in as the newest observation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Action, ActionSequence, Box2D, Frame
from .sim import EE_MARGIN, TABLE_HALF, SceneState, Tabletop


class PredictionError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionContext:
    prev: Frame
    curr: Frame
    a_prev: Action
    a_curr: Action
    aux: Optional[SceneState] = None
    ee_box: Optional[Box2D] = None
    attached_box: Optional[Box2D] = None

    def __post_init__(self):
        if self.prev.timestamp + 1 != self.curr.timestamp:
            raise ValueError("prev must be the frame immediately before curr")


@dataclass(frozen=True)
class PredictedVideo:
    candidate_id: int
    frames: tuple

    def __len__(self) -> int:
        return len(self.frames)


def broadcast_actions(ctx: PredictionContext, a_next: Action) -> tuple:
    """Action-conditioned inputs for a learned model: two (h, w, 3 + 21) float arrays."""
    h, w = ctx.curr.shape[:2]
    acts = np.concatenate([ctx.a_prev.as_array(), ctx.a_curr.as_array(), a_next.as_array()])
    planes = np.broadcast_to(acts, (h, w, acts.size))
    prev = np.concatenate([ctx.prev.pixels / 255.0, planes], axis=2)
    curr = np.concatenate([ctx.curr.pixels / 255.0, planes], axis=2)
    return prev, curr


class Predictor:
    def predict(self, ctx: PredictionContext, seq: ActionSequence) -> PredictedVideo:
        raise NotImplementedError

    def predict_batch(self, ctx: PredictionContext, cands) -> list:
        lengths = {len(c) for c in cands}
        if len(lengths) > 1:
            raise PredictionError("all candidates must share the same horizon")
        return [self.predict(ctx, c) for c in cands]


class OraclePredictor(Predictor):
    """Steps a copy of the simulator state through each action and renders it."""

    def __init__(self, sim: Tabletop):
        self.sim = sim

    def predict(self, ctx: PredictionContext, seq: ActionSequence) -> PredictedVideo:
        if ctx.aux is None:
            raise PredictionError("oracle prediction needs the simulator state in ctx.aux")
        state = ctx.aux
        frames = []
        t0 = ctx.curr.timestamp
        for k, a in enumerate(seq.actions):
            state = self.sim.step(state, a)
            f = self.sim.render(state)
            frames.append(Frame(f.pixels, t0 + k + 1))
        return PredictedVideo(seq.id, tuple(frames))


class NoisyOraclePredictor(OraclePredictor):
    """Oracle frames plus zero-mean Gaussian pixel noise; ``noise_std`` is in [0, 1] intensity units."""

    def __init__(self, sim: Tabletop, noise_std: float = 5.0 / 255.0, seed: int = 0):
        super().__init__(sim)
        self.noise_std = noise_std
        self.seed = seed

    def predict(self, ctx: PredictionContext, seq: ActionSequence) -> PredictedVideo:
        clean = super().predict(ctx, seq)
        rng = np.random.default_rng([self.seed, ctx.curr.timestamp, seq.id])
        frames = []
        for f in clean.frames:
            noise = rng.normal(0.0, self.noise_std * 255.0, size=f.shape)
            px = np.clip(np.rint(f.pixels + noise), 0, 255).astype(np.uint8)
            frames.append(Frame(px, f.timestamp))
        return PredictedVideo(seq.id, tuple(frames))


def _round(v: float) -> int:
    return int(np.floor(v + 0.5))


def _rect(box: Box2D) -> tuple:
    wpx, hpx = max(1, _round(box.w)), max(1, _round(box.h))
    c0, r0 = _round(box.cx - wpx / 2), _round(box.cy - hpx / 2)
    return r0, r0 + hpx, c0, c0 + wpx


class WarpPredictor(Predictor):
    """Kinematic sprite warp: shifts the end-effector patch by each commanded translation.

    The vacated area is filled with the background estimate (median frame
    colour).  Rotation, height and grasp changes are not rendered.
    """

    def __init__(self, frame_size: int = 64, table_half: float = TABLE_HALF, ee_margin: float = EE_MARGIN):
        self.size = frame_size
        self.ppm = frame_size / (2 * table_half)
        self.half = table_half
        self.lim = table_half - ee_margin

    @classmethod
    def for_sim(cls, sim: Tabletop) -> "WarpPredictor":
        return cls(sim.size, TABLE_HALF, TABLE_HALF - sim.ee_lim)

    def predict(self, ctx: PredictionContext, seq: ActionSequence) -> PredictedVideo:
        if ctx.ee_box is None:
            raise PredictionError("sprite warp needs the end-effector box in ctx.ee_box")
        base = ctx.curr.pixels
        background = np.median(base.reshape(-1, 3), axis=0).astype(np.uint8)
        boxes = [ctx.ee_box] + ([ctx.attached_box] if ctx.attached_box is not None else [])
        clean = base.copy()
        sprites = []
        for b in boxes:
            r0, r1, c0, c1 = _rect(b)
            r0c, r1c, c0c, c1c = max(r0, 0), min(r1, self.size), max(c0, 0), min(c1, self.size)
            sprites.append((b, base[r0c:r1c, c0c:c1c].copy(), r0c - r0, c0c - c0))
        for b, *_ in sprites:
            r0, r1, c0, c1 = _rect(b)
            clean[max(r0, 0):max(r1, 0), max(c0, 0):max(c1, 0)] = background

        x0 = ctx.ee_box.cx / self.ppm - self.half
        y0 = self.half - ctx.ee_box.cy / self.ppm
        x, y = x0, y0
        frames = []
        for k, a in enumerate(seq.actions):
            x = float(np.clip(x + a.dx, -self.lim, self.lim))
            y = float(np.clip(y + a.dy, -self.lim, self.lim))
            shift_c = (x - x0) * self.ppm
            shift_r = -(y - y0) * self.ppm
            img = clean.copy()
            # attached patches first so the end-effector is drawn on top
            for b, patch, dr, dc in reversed(sprites):
                moved = Box2D(b.cx + shift_c, b.cy + shift_r, b.w, b.h, b.label)
                r0, _, c0, _ = _rect(moved)
                r0, c0 = r0 + dr, c0 + dc
                ph, pw = patch.shape[:2]
                rr0, cc0 = max(r0, 0), max(c0, 0)
                rr1, cc1 = min(r0 + ph, self.size), min(c0 + pw, self.size)
                if rr1 > rr0 and cc1 > cc0:
                    img[rr0:rr1, cc0:cc1] = patch[rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0]
            frames.append(Frame(img, ctx.curr.timestamp + k + 1))
        return PredictedVideo(seq.id, tuple(frames))


def make_predictor(kind: str, sim: Tabletop, noise_std: float = 5.0 / 255.0, seed: int = 0) -> Predictor:
    if kind == "oracle":
        return OraclePredictor(sim)
    if kind == "noisy":
        return NoisyOraclePredictor(sim, noise_std, seed)
    if kind == "warp":
        return WarpPredictor.for_sim(sim)
    raise ValueError(f"unknown predictor kind {kind!r}")
