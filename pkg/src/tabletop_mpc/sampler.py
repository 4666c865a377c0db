"""Conditional action sampling around a direction-derived mean."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ACTION_DIM, Action, ActionSequence

SOURCES = ("vlm", "sub", "blended")


@dataclass(frozen=True, eq=False)
class SamplingMean:
    mu: np.ndarray
    source: str

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(ACTION_DIM)
        if not np.all(np.isfinite(mu)):
            raise ValueError("sampling mean must be finite")
        if not 0.0 <= mu[6] <= 1.0:
            raise ValueError(f"grasp component must lie in [0, 1], got {mu[6]}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        mu.flags.writeable = False
        object.__setattr__(self, "mu", mu)

    def __eq__(self, other):
        if not isinstance(other, SamplingMean):
            return NotImplemented
        return self.source == other.source and np.array_equal(self.mu, other.mu)

    @classmethod
    def zeros(cls, source: str = "sub") -> "SamplingMean":
        return cls(np.zeros(ACTION_DIM), source)


def hint_to_mean(hint, w_m: float, w_r: float) -> SamplingMean:
    h = hint.as_array()
    scale = np.array([w_m, w_m, w_m, w_r, w_r, w_r, 1.0])
    return SamplingMean(h * scale, "vlm")


def blend_means(vlm: SamplingMean, sub: SamplingMean, w_VLM: float, w_sub: float) -> SamplingMean:
    if not math.isclose(w_VLM + w_sub, 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError("w_VLM + w_sub must equal 1")
    if vlm.source != "vlm" or sub.source != "sub":
        raise ValueError("blend expects a vlm mean and a sub mean")
    return SamplingMean(w_VLM * vlm.mu + w_sub * sub.mu, "blended")


def draw_raw(mu: SamplingMean, N: int, T: int, sigma, rng: np.random.Generator) -> np.ndarray:
    """Pre-clamp Gaussian draws, shape (N, T, 7)."""
    sigma = np.asarray(sigma, dtype=float)
    if N < 1 or T < 1:
        raise ValueError("N and T must be >= 1")
    if sigma.shape != (ACTION_DIM,) or not np.all(sigma > 0):
        raise ValueError("sigma must be 7 positive values")
    return mu.mu + sigma * rng.standard_normal((N, T, ACTION_DIM))


def clamp_raw(raw: np.ndarray, d_max: float = 0.05, r_max: float = 0.2) -> np.ndarray:
    out = np.empty_like(raw)
    out[..., 0:3] = np.clip(raw[..., 0:3], -d_max, d_max)
    out[..., 3:6] = np.clip(raw[..., 3:6], -r_max, r_max)
    out[..., 6] = (raw[..., 6] >= 0.5).astype(float)
    return out


def sample_candidates(mu: SamplingMean, N: int, T: int, sigma, rng: np.random.Generator,
                      d_max: float = 0.05, r_max: float = 0.2) -> list:
    actions = clamp_raw(draw_raw(mu, N, T, sigma, rng), d_max, r_max)
    return [
        ActionSequence(tuple(Action.from_array(a) for a in actions[n]), id=n)
        for n in range(N)
    ]


def candidates_array(cands) -> np.ndarray:
    return np.stack([c.as_array() for c in cands])
