"""Domain types, run configuration, seeded randomness and episode logs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

ACTION_DIM = 7
ABLATION_MODES = ("full", "rs", "pd", "vs")
PREDICTOR_KINDS = ("oracle", "warp", "noisy")
VLM_KINDS = ("oracle", "remote")
END_SIGNALS = ("success", "budget_exhausted", "failure", "error")
BOX_LABELS = ("end_effector", "sub_goal", "interference")


class ConfigError(ValueError):
    pass


class LogOrderError(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    g: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.rx, self.ry, self.rz, self.g], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "Action":
        a = [float(v) for v in arr]
        return cls(a[0], a[1], a[2], a[3], a[4], a[5], int(a[6]))

    def is_valid(self, d_max: float = 0.05, r_max: float = 0.2) -> bool:
        trans = (self.dx, self.dy, self.dz)
        rot = (self.rx, self.ry, self.rz)
        return (
            all(abs(v) <= d_max for v in trans)
            and all(abs(v) <= r_max for v in rot)
            and self.g in (0, 1)
            and type(self.g) is int
        )


ZERO_ACTION = Action()


@dataclass(frozen=True)
class ActionSequence:
    actions: tuple
    id: int = 0

    def __post_init__(self):
        if len(self.actions) < 1:
            raise ValueError("an action sequence needs at least one action")

    def __len__(self) -> int:
        return len(self.actions)

    def as_array(self) -> np.ndarray:
        return np.stack([a.as_array() for a in self.actions])


@dataclass(frozen=True, eq=False)
class Frame:
    """An RGB observation; pixels are a read-only (h, w, 3) uint8 array."""

    pixels: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"frame must be h x w x 3, got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"frame must be uint8, got {px.dtype}")
        if px.flags.writeable:
            px = px.copy()
            px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return self.timestamp == other.timestamp and np.array_equal(self.pixels, other.pixels)

    def digest(self) -> str:
        return hashlib.sha1(self.pixels.tobytes()).hexdigest()


@dataclass(frozen=True)
class Goal:
    kind: str
    image: Optional[Frame] = None
    instruction: Optional[str] = None

    def __post_init__(self):
        if self.kind == "image":
            ok = self.image is not None and self.instruction is None
        elif self.kind == "instruction":
            ok = self.instruction is not None and self.image is None
        else:
            raise ValueError(f"unknown goal kind {self.kind!r}")
        if not ok:
            raise ValueError("goal must carry exactly the field matching its kind")

    @classmethod
    def from_image(cls, frame: Frame) -> "Goal":
        return cls("image", image=frame)

    @classmethod
    def from_text(cls, text: str) -> "Goal":
        return cls("instruction", instruction=text)

    def describe(self) -> str:
        if self.kind == "instruction":
            return self.instruction
        return "reach the scene shown in the right half of the image"


@dataclass(frozen=True)
class Box2D:
    cx: float
    cy: float
    w: float
    h: float
    label: str

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def inside(self, width: int, height: int, eps: float = 1e-9) -> bool:
        return (
            self.w > 0
            and self.h > 0
            and self.cx - self.w / 2 >= -eps
            and self.cy - self.h / 2 >= -eps
            and self.cx + self.w / 2 <= width + eps
            and self.cy + self.h / 2 <= height + eps
        )

    def clamped(self, width: int, height: int) -> "Box2D":
        """Shrink to at most the frame size and shift the center so the box lies inside."""
        w = float(min(max(self.w, 1.0), width))
        h = float(min(max(self.h, 1.0), height))
        cx = float(np.clip(self.cx, w / 2, width - w / 2))
        cy = float(np.clip(self.cy, h / 2, height - h / 2))
        return Box2D(cx, cy, w, h, self.label)

    def corners(self):
        return self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2

    def iou(self, other: "Box2D") -> float:
        ax0, ay0, ax1, ay1 = self.corners()
        bx0, by0, bx1, by1 = other.corners()
        iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0.0, min(ay1, by1) - max(ay0, by0))
        inter = iw * ih
        union = self.w * self.h + other.w * other.h - inter
        return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class RunConfig:
    N: int = 30
    T: int = 10
    w_m: float = 0.03
    w_r: float = 0.1
    w_VLM: float = 0.7
    w_sub: float = 0.3
    sigma: tuple = (0.01, 0.01, 0.01, 0.05, 0.05, 0.05, 0.25)
    T_max: int = 60
    seed: int = 0
    predictor_kind: str = "oracle"
    vlm_kind: str = "oracle"
    task_name: str = "push_button"
    ablation_mode: str = "full"
    d_max: float = 0.05
    r_max: float = 0.2
    frame_size: int = 64
    noise_std: float = 5.0 / 255.0
    deadband: float = 0.01
    grasp_radius: float = 0.03
    press_radius: float = 0.03
    search_window: int = 12
    ncc_threshold: float = 0.5
    vlm_retries: int = 3

    def __post_init__(self):
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        self.validate()

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}")

        if self.N < 1:
            bad("N", "must be >= 1")
        if self.T < 1:
            bad("T", "must be >= 1")
        if self.T_max < 1:
            bad("T_max", "must be >= 1")
        if not math.isclose(self.w_VLM + self.w_sub, 1.0, rel_tol=0, abs_tol=1e-9):
            bad("w_VLM", "w_VLM + w_sub must equal 1")
        if len(self.sigma) != ACTION_DIM:
            bad("sigma", f"needs {ACTION_DIM} components")
        if not all(s > 0 and math.isfinite(s) for s in self.sigma):
            bad("sigma", "every component must be > 0")
        if self.w_m <= 0:
            bad("w_m", "must be > 0")
        if self.w_r <= 0:
            bad("w_r", "must be > 0")
        if self.d_max <= 0 or self.r_max <= 0:
            bad("d_max", "action bounds must be > 0")
        if self.predictor_kind not in PREDICTOR_KINDS:
            bad("predictor_kind", f"must be one of {PREDICTOR_KINDS}")
        if self.vlm_kind not in VLM_KINDS:
            bad("vlm_kind", f"must be one of {VLM_KINDS}")
        if self.ablation_mode not in ABLATION_MODES:
            bad("ablation_mode", f"must be one of {ABLATION_MODES}")
        if self.frame_size < 16:
            bad("frame_size", "must be >= 16")
        if self.noise_std < 0:
            bad("noise_std", "must be >= 0")
        if self.search_window < 1:
            bad("search_window", "must be >= 1")
        if self.vlm_retries < 0:
            bad("vlm_retries", "must be >= 0")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def sigma_array(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=float)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            return tuple(float(p) for p in raw.replace("(", "").replace(")", "").split(",") if p.strip())
        return raw.strip().strip('"').strip("'")
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def parse_config(text: str, **overrides) -> RunConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown key (line {lineno})")
        values[key] = _coerce(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load_config(path, **overrides) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), **overrides)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def split_rngs(seed: int, names: Sequence[str] = ("sampler", "predictor", "sim")) -> dict:
    """One generator per consumer, all derived from a single seed."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


@dataclass(frozen=True)
class StepRecord:
    step: int
    obs_digest: str
    mu: tuple
    chosen: int
    action: tuple
    costs: tuple  # per-candidate dicts: id, c_pixel, c_vlm, c_total
    w_D: float
    duration_ms: float = 0.0
    degraded: bool = False
    reward: float = 0.0
    end: Optional[str] = None

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "step": self.step,
            "obs_digest": self.obs_digest,
            "mu": list(self.mu),
            "chosen": self.chosen,
            "action": list(self.action),
            "costs": [dict(c) for c in self.costs],
            "w_D": self.w_D,
            "duration_ms": self.duration_ms if include_timing else 0.0,
            "degraded": self.degraded,
            "reward": self.reward,
            "end": self.end,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(
            step=int(d["step"]),
            obs_digest=d["obs_digest"],
            mu=tuple(d["mu"]),
            chosen=int(d["chosen"]),
            action=tuple(d["action"]),
            costs=tuple(dict(c) for c in d["costs"]),
            w_D=d["w_D"],
            duration_ms=d.get("duration_ms", 0.0),
            degraded=bool(d.get("degraded", False)),
            reward=d.get("reward", 0.0),
            end=d.get("end"),
        )

    def with_end(self, end: Optional[str], reward: float) -> "StepRecord":
        return dataclasses.replace(self, end=end, reward=reward)


@dataclass
class EpisodeLog:
    records: list = field(default_factory=list)
    path: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def end_signal(self) -> Optional[str]:
        return self.records[-1].end if self.records else None

    @property
    def success(self) -> bool:
        return self.end_signal == "success"

    def to_jsonl(self, include_timing: bool = True) -> str:
        return "".join(json.dumps(r.to_dict(include_timing)) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                log = append_step(log, StepRecord.from_dict(json.loads(line)))
        return log

    @classmethod
    def load(cls, path) -> "EpisodeLog":
        with open(path, encoding="utf-8") as fh:
            return cls.from_jsonl(fh.read())


def append_step(log: EpisodeLog, record: StepRecord) -> EpisodeLog:
    expected = log.records[-1].step + 1 if log.records else 0
    if record.step != expected:
        raise LogOrderError(f"step {record.step} out of order, expected {expected}")
    if log.path is not None:
        with open(log.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.to_dict()) + "\n")
    log.records.append(record)
    return log
