"""Pixel distance cost, box attraction/repulsion cost and their switched blend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CostReport:
    candidate_id: int
    c_pixel: float
    c_vlm: float
    w_D: float
    c_total: float
    pixel_trace: tuple = ()
    vlm_trace: tuple = ()

    def summary(self) -> dict:
        return {"id": self.candidate_id, "c_pixel": self.c_pixel, "c_vlm": self.c_vlm, "c_total": self.c_total}


def _unit(img) -> np.ndarray:
    px = getattr(img, "pixels", img)
    px = np.asarray(px)
    if px.dtype == np.uint8:
        return px.astype(float) / 255.0
    return px.astype(float)


def pixel_trace(frames, goal) -> np.ndarray:
    """Per-frame L2 distance to the goal; 8-bit images are scaled to [0, 1] first."""
    g = _unit(goal)
    out = np.empty(len(frames))
    for k, f in enumerate(frames):
        x = _unit(f)
        if x.shape != g.shape:
            raise ValueError(f"frame shape {x.shape} does not match goal shape {g.shape}")
        out[k] = np.sqrt(np.sum((x - g) ** 2))
    return out


def pixel_cost(video, goal) -> float:
    frames = getattr(video, "frames", video)
    return float(pixel_trace(frames, goal).sum())


def vlm_trace(tracked) -> np.ndarray:
    """Per-frame attraction to the sub-goal minus distance to the nearest interference box."""
    out = np.empty(len(tracked))
    for k, su in enumerate(tracked):
        e = su.e.center
        attraction = float(np.linalg.norm(e - su.s.center))
        repulsion = min((float(np.linalg.norm(e - b.center)) for b in su.I), default=0.0)
        out[k] = attraction - repulsion
    return out


def vlm_cost(tracked) -> float:
    return float(vlm_trace(tracked).sum())


def minmax(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def combine(c_pixel, c_vlm, w_D, pixel_traces=None, vlm_traces=None) -> list:
    w = float(getattr(w_D, "w_D", w_D))
    if len(c_pixel) != len(c_vlm):
        raise ValueError(f"cost vectors differ in length: {len(c_pixel)} vs {len(c_vlm)}")
    if len(c_pixel) == 0:
        return []
    total = w * minmax(c_pixel) + (1.0 - w) * minmax(c_vlm)
    pt = pixel_traces if pixel_traces is not None else [()] * len(c_pixel)
    vt = vlm_traces if vlm_traces is not None else [()] * len(c_pixel)
    return [
        CostReport(n, float(c_pixel[n]), float(c_vlm[n]), w, float(total[n]), tuple(pt[n]), tuple(vt[n]))
        for n in range(len(c_pixel))
    ]


def select_best(reports) -> int:
    if not reports:
        raise ValueError("no candidates to select from")
    best = min(reports, key=lambda r: (r.c_total, r.candidate_id))
    return best.candidate_id
