"""Vision-language queries: movement direction, scene boxes and cost switch.

Two implementations share one duck-typed contract (``query_direction``,
``query_boxes``, ``query_switch``, each taking ``(obs, goal, aux=None)``):

* ``ScriptedVLM`` answers from the simulator ground truth passed as ``aux``.
* ``RemoteVLM`` sends the observation to a chat-completions style HTTP endpoint
  and parses the JSON object embedded in the reply.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import os
import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional

import numpy as np

from .core import Box2D, Frame, Goal
from .sim import EE_SIZE, NEAR_GOAL, TABLE_HALF, SceneState, Tabletop

log = logging.getLogger(__name__)

ENDPOINT_ENV = "TABLETOP_MPC_VLM_URL"
TOKEN_ENV = "TABLETOP_MPC_VLM_TOKEN"
MODEL_ENV = "TABLETOP_MPC_VLM_MODEL"
DIRECTION_KEYS = ("dx", "dy", "dz", "rx", "ry", "rz", "g")
SWITCH_VALUES = (0.0, 0.5, 1.0)


@dataclass(frozen=True)
class DirectionHint:
    dx: int = 0
    dy: int = 0
    dz: int = 0
    rx: int = 0
    ry: int = 0
    rz: int = 0
    g: int = 0

    def __post_init__(self):
        for k in DIRECTION_KEYS[:-1]:
            v = getattr(self, k)
            if type(v) is not int or v not in (-1, 0, 1):
                raise ValueError(f"{k} must be -1, 0 or +1, got {v!r}")
        if type(self.g) is not int or self.g not in (0, 1):
            raise ValueError(f"g must be 0 or 1, got {self.g!r}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in DIRECTION_KEYS], dtype=float)


@dataclass(frozen=True)
class SceneUnderstanding:
    e: Box2D
    s: Box2D
    I: tuple = field(default_factory=tuple)
    low_confidence: tuple = ()  # per box in boxes() order, set by the tracker

    def __post_init__(self):
        object.__setattr__(self, "I", tuple(self.I))
        if self.e.label != "end_effector" or self.s.label != "sub_goal":
            raise ValueError("box labels do not match their roles")
        if any(b.label != "interference" for b in self.I):
            raise ValueError("interference boxes must be labelled interference")

    def boxes(self) -> list:
        return [self.e, self.s, *self.I]

    def valid_in(self, width: int, height: int) -> bool:
        return all(b.inside(width, height) for b in self.boxes())


@dataclass(frozen=True)
class SwitchWeight:
    w_D: float

    def __post_init__(self):
        if isinstance(self.w_D, bool) or self.w_D not in SWITCH_VALUES:
            raise ValueError(f"w_D must be one of {SWITCH_VALUES}, got {self.w_D!r}")
        object.__setattr__(self, "w_D", float(self.w_D))


def _sign(v: float, deadband: float) -> int:
    if abs(v) <= deadband:
        return 0
    return 1 if v > 0 else -1


class ScriptedVLM:
    """Ground-truth oracle; ``aux`` must be the live ``SceneState``."""

    def __init__(self, sim: Tabletop, deadband: float = 0.01):
        self.sim = sim
        self.task = sim.task
        self.deadband = deadband
        self.fallbacks = 0

    def _state(self, aux) -> SceneState:
        if not isinstance(aux, SceneState):
            raise TypeError("the scripted oracle needs the simulator state as aux")
        return aux

    def _grasp_bit(self, state: SceneState) -> int:
        rule = self.task.success_rule
        kind = rule["kind"]
        active = state.obj(self.task.active_subgoal(state))
        d = math.dist(state.ee_pose, active.pose)
        if kind == "press":
            return 0
        if state.held is None:
            return int(active.has("graspable") and d <= self.sim.grasp_radius)
        if kind == "place":
            # keep holding until above the target, then release
            return int(d > self.sim.grasp_radius)
        return 1

    def query_direction(self, obs: Frame, goal: Goal, aux=None) -> DirectionHint:
        state = self._state(aux)
        target, _ = self.sim.subgoal_target(state)
        dx = _sign(target[0] - state.ee_pose[0], self.deadband)
        dy = _sign(target[1] - state.ee_pose[1], self.deadband)
        return DirectionHint(dx, dy, 0, 0, 0, 0, self._grasp_bit(state))

    def query_boxes(self, obs: Frame, goal: Goal, aux=None) -> SceneUnderstanding:
        e, s, interference = self.sim.ground_truth_boxes(self._state(aux))
        return SceneUnderstanding(e, s, tuple(interference))

    def query_switch(self, obs: Frame, goal: Goal, aux=None) -> SwitchWeight:
        state = self._state(aux)
        active = self.task.active_subgoal(state)
        if not self.task.multi_stage:
            target, _ = self.sim.subgoal_target(state)
            near = math.dist(state.ee_pose, target) < NEAR_GOAL
            return SwitchWeight(1.0 if near else 0.5)
        return SwitchWeight(0.5 if active == self.task.sub_goals[-1] else 0.0)


# reply parsing ------------------------------------------------------------


def extract_json(text: str) -> Optional[dict]:
    """Return the first balanced ``{...}`` substring that decodes to a JSON object."""
    start = text.find("{")
    while start != -1:
        depth, in_str, esc = 0, False, False
        for i in range(start, len(text)):
            ch = text[i]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(text[start:i + 1])
                    except (ValueError, RecursionError):
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = text.find("{", start + 1)
    return None


def _as_text(reply) -> str:
    if isinstance(reply, (bytes, bytearray)):
        return bytes(reply).decode("utf-8", errors="replace")
    return str(reply)


def _number(v) -> Optional[float]:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        return None
    try:
        v = float(v)
    except OverflowError:
        return None
    return v if math.isfinite(v) else None


def parse_direction(reply) -> Optional[DirectionHint]:
    obj = extract_json(_as_text(reply))
    if obj is None or not all(k in obj for k in DIRECTION_KEYS):
        return None
    vals = {}
    for k in DIRECTION_KEYS:
        v = _number(obj[k])
        allowed = (0.0, 1.0) if k == "g" else (-1.0, 0.0, 1.0)
        if v is None or v not in allowed:
            return None
        vals[k] = int(v)
    return DirectionHint(**vals)


def _box(raw, label: str, width: int, height: int) -> Optional[Box2D]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        return None
    nums = [_number(v) for v in raw]
    if any(v is None for v in nums):
        return None
    cx, cy, w, h = nums
    if w <= 0 or h <= 0:
        return None
    return Box2D(cx, cy, w, h, label).clamped(width, height)


def parse_boxes(reply, width: int, height: int) -> Optional[SceneUnderstanding]:
    obj = extract_json(_as_text(reply))
    if obj is None:
        return None
    e = _box(obj.get("end_effector"), "end_effector", width, height)
    s = _box(obj.get("sub_goal"), "sub_goal", width, height)
    raw_i = obj.get("interference", [])
    if e is None or s is None or not isinstance(raw_i, list):
        return None
    boxes = [_box(b, "interference", width, height) for b in raw_i]
    if any(b is None for b in boxes):
        return None
    return SceneUnderstanding(e, s, tuple(boxes))


_BARE_NUMBER = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+))\s*$")


def parse_switch(reply) -> Optional[SwitchWeight]:
    text = _as_text(reply)
    obj = extract_json(text)
    if obj is not None:
        v = _number(obj.get("w_D"))
    else:
        m = _BARE_NUMBER.match(text)
        v = float(m.group(1)) if m else None
    if v is None or v not in SWITCH_VALUES:
        return None
    return SwitchWeight(v)


# remote client ------------------------------------------------------------


def load_prompts(directory: Optional[str] = None) -> dict:
    prompts = {}
    for name in ("direction", "boxes", "switch"):
        if directory is not None:
            with open(os.path.join(directory, f"{name}.txt"), encoding="utf-8") as fh:
                prompts[name] = fh.read()
        else:
            prompts[name] = resources.files("tabletop_mpc").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
    return prompts


def encode_png(pixels: np.ndarray) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def compose_image(obs: Frame, goal: Goal) -> np.ndarray:
    """Observation alone, or observation and goal image side by side."""
    if goal.kind == "image" and goal.image.shape == obs.shape:
        return np.concatenate([obs.pixels, goal.image.pixels], axis=1)
    return obs.pixels


def build_request(prompt: str, image_b64: str, model: str) -> dict:
    return {
        "model": model,
        "temperature": 0,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{image_b64}"}},
            ],
        }],
    }


def reply_text(body) -> str:
    """Message text from a chat-completions response body."""
    content = body["choices"][0]["message"]["content"]
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise ValueError("reply content is not text")
    return content


def http_transport(endpoint: str, token: Optional[str], timeout: float = 60.0) -> Callable[[dict], str]:
    import requests

    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"

    def send(payload: dict) -> str:
        resp = requests.post(endpoint, json=payload, headers=headers, timeout=timeout)
        resp.raise_for_status()
        return reply_text(resp.json())

    return send


class RemoteVLM:
    """Client for a remote model; every query retries, then falls back and counts the fallback."""

    def __init__(self, endpoint: Optional[str] = None, token: Optional[str] = None, model: Optional[str] = None,
                 prompts: Optional[dict] = None, retries: int = 3, max_in_flight: int = 4,
                 transport: Optional[Callable[[dict], str]] = None):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        self.model = model or os.environ.get(MODEL_ENV, "default")
        token = token or os.environ.get(TOKEN_ENV)
        if transport is None:
            if not self.endpoint:
                raise ValueError(f"no VLM endpoint: set {ENDPOINT_ENV}")
            transport = http_transport(self.endpoint, token)
        self.transport = transport
        self.prompts = prompts or load_prompts()
        self.retries = retries
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._last_boxes: Optional[SceneUnderstanding] = None
        self.fallbacks = 0

    def _ask(self, kind: str, obs: Frame, goal: Goal, parse):
        prompt = self.prompts[kind].replace("{goal}", goal.describe())
        payload = build_request(prompt, encode_png(compose_image(obs, goal)), self.model)
        for attempt in range(self.retries + 1):
            try:
                with self._gate:
                    text = self.transport(payload)
            except Exception as exc:  # transport errors are retried like malformed replies
                log.warning("%s query failed (attempt %d): %s", kind, attempt + 1, exc)
                continue
            parsed = parse(text)
            if parsed is not None:
                return parsed
            log.warning("%s reply rejected (attempt %d): %.200r", kind, attempt + 1, text)
        with self._lock:
            self.fallbacks += 1
        return None

    def query_direction(self, obs: Frame, goal: Goal, aux=None) -> DirectionHint:
        hint = self._ask("direction", obs, goal, parse_direction)
        return hint if hint is not None else DirectionHint()

    def query_boxes(self, obs: Frame, goal: Goal, aux=None) -> SceneUnderstanding:
        h, w = obs.shape[:2]
        su = self._ask("boxes", obs, goal, lambda t: parse_boxes(t, w, h))
        if su is None:
            su = self._last_boxes or neutral_understanding(w, h)
        self._last_boxes = su
        return su

    def query_switch(self, obs: Frame, goal: Goal, aux=None) -> SwitchWeight:
        sw = self._ask("switch", obs, goal, parse_switch)
        return sw if sw is not None else SwitchWeight(0.5)


def neutral_understanding(width: int, height: int) -> SceneUnderstanding:
    """All boxes at the frame centre; gives every candidate the same knowledge cost."""
    size = max(1.0, EE_SIZE * width / (2 * TABLE_HALF))
    c = (width / 2, height / 2)
    return SceneUnderstanding(
        Box2D(*c, size, size, "end_effector"),
        Box2D(*c, size, size, "sub_goal"),
        (),
    )
