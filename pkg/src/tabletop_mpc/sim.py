"""Deterministic top-down tabletop world: dynamics, rendering, tasks and rewards.

World coordinates are meters on a square table centred at the origin, x to the
right and y up.  Pixel coordinates put (0, 0) at the top-left corner of the
frame, so a world point maps to ``col = (x + H) * ppm`` and ``row = (H - y) * ppm``
with ``H`` the table half-size and ``ppm`` pixels per meter.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .core import Action, Box2D, Frame, Goal

TABLE_HALF = 0.4
EE_SIZE = 0.075
# ee centre stays this far from the table edge so a held object never leaves the table
EE_MARGIN = 0.065
TABLE_COLOR = (200, 170, 130)
EE_COLOR = (35, 35, 35)
EE_BORDER_PX = 2
MAX_PLACEMENT_TRIES = 2000
NEAR_GOAL = 0.1
TASK_NAMES = ("push_button", "move_to_area", "pick_place", "wipe")


class PlacementError(RuntimeError):
    pass


class UnknownTaskError(KeyError):
    pass


@dataclass(frozen=True)
class SceneObject:
    name: str
    pose: tuple
    extent: tuple
    color: tuple
    flags: frozenset = frozenset()
    pressed: bool = False
    pressed_color: Optional[tuple] = None
    grid: tuple = (0, 0)
    cells: tuple = ()  # row-major wet flags for objects flagged "wet"

    def has(self, flag: str) -> bool:
        return flag in self.flags

    def cell_centers(self) -> np.ndarray:
        rows, cols = self.grid
        w, h = self.extent
        xs = self.pose[0] - w / 2 + (np.arange(cols) + 0.5) * w / cols
        ys = self.pose[1] + h / 2 - (np.arange(rows) + 0.5) * h / rows
        return np.array([(x, y) for y in ys for x in xs])

    def cell_extent(self) -> tuple:
        rows, cols = self.grid
        return self.extent[0] / cols, self.extent[1] / rows


@dataclass(frozen=True)
class SceneState:
    ee_pose: tuple
    ee_angle: float = 0.0
    gripper: str = "open"
    held: Optional[str] = None
    objects: tuple = ()
    step: int = 0
    violation: bool = False

    def obj(self, name: str) -> SceneObject:
        for o in self.objects:
            if o.name == name:
                return o
        raise KeyError(name)

    def replace_obj(self, new: SceneObject) -> "SceneState":
        objs = tuple(new if o.name == new.name else o for o in self.objects)
        return dataclasses.replace(self, objects=objs)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    instruction: str
    objects: tuple  # raw object templates from the task file
    sub_goals: tuple
    interference: tuple
    success_rule: dict
    placement: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sub_goals:
            raise ValueError("a task needs at least one sub-goal")

    @property
    def goal(self) -> Goal:
        return Goal.from_text(self.instruction)

    @property
    def multi_stage(self) -> bool:
        return len(self.sub_goals) > 1

    def success(self, state: SceneState) -> bool:
        rule = self.success_rule
        kind = rule["kind"]
        if state.violation:
            return False
        if kind == "press":
            return state.obj(rule["object"]).pressed
        if kind == "place":
            return all(_placed(state, o, t) for o, t in rule["pairs"])
        if kind == "wipe":
            return not any(state.obj(rule["patch"]).cells)
        raise ValueError(f"unknown success kind {kind!r}")

    def reward(self, state: SceneState) -> float:
        if self.success(state):
            return 100.0
        rule = self.success_rule
        kind = rule["kind"]
        diag = 2 * math.sqrt(2) * TABLE_HALF
        if kind == "press":
            d = _dist(state.ee_pose, state.obj(rule["object"]).pose)
            return 100.0 * (1.0 - min(d / diag, 1.0))
        if kind == "place":
            pairs = rule["pairs"]
            total = 0.0
            for o, t in pairs:
                d = _dist(state.obj(o).pose, state.obj(t).pose)
                total += 1.0 - min(d / diag, 1.0)
            return 100.0 * total / len(pairs)
        if kind == "wipe":
            cells = state.obj(rule["patch"]).cells
            return 100.0 * (1.0 - sum(cells) / len(cells))
        raise ValueError(f"unknown success kind {kind!r}")

    def active_subgoal(self, state: SceneState) -> str:
        """Name of the first sub-goal that is not yet satisfied."""
        rule = self.success_rule
        kind = rule["kind"]
        if kind == "press":
            return rule["object"]
        if kind == "place":
            for o, t in rule["pairs"]:
                if _placed(state, o, t):
                    continue
                return t if state.held == o else o
            return rule["pairs"][-1][1]
        if kind == "wipe":
            return rule["patch"] if state.held == rule["tool"] else rule["tool"]
        raise ValueError(f"unknown success kind {kind!r}")


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _placed(state: SceneState, obj: str, target: str) -> bool:
    if state.held == obj:
        return False
    o, t = state.obj(obj), state.obj(target)
    return abs(o.pose[0] - t.pose[0]) <= t.extent[0] / 2 and abs(o.pose[1] - t.pose[1]) <= t.extent[1] / 2


def _overlap(p, ext_p, q, ext_q) -> bool:
    return abs(p[0] - q[0]) < (ext_p[0] + ext_q[0]) / 2 and abs(p[1] - q[1]) < (ext_p[1] + ext_q[1]) / 2


def task_from_dict(d: dict) -> TaskSpec:
    return TaskSpec(
        name=d["name"],
        instruction=d.get("instruction", d["name"]),
        objects=tuple(d["objects"]),
        sub_goals=tuple(d["sub_goals"]),
        interference=tuple(d.get("interference", ())),
        success_rule=d["success"],
        placement=d.get("placement", {}),
    )


def load_task_file(path) -> TaskSpec:
    with open(path, encoding="utf-8") as fh:
        return task_from_dict(json.load(fh))


def load_task(name: str) -> TaskSpec:
    """Load a built-in task by name, or a task file when given a path."""
    if os.path.exists(name):
        return load_task_file(name)
    if name not in TASK_NAMES:
        raise UnknownTaskError(f"unknown task {name!r}; choose from {', '.join(TASK_NAMES)}")
    text = resources.files("tabletop_mpc").joinpath("tasks", f"{name}.json").read_text(encoding="utf-8")
    return task_from_dict(json.loads(text))


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


class Tabletop:
    """Simulator bound to one task; every method is a pure function of its inputs."""

    def __init__(self, task: TaskSpec, frame_size: int = 64, grasp_radius: float = 0.03,
                 press_radius: float = 0.03):
        self.task = task
        self.size = frame_size
        self.ppm = frame_size / (2 * TABLE_HALF)
        self.grasp_radius = grasp_radius
        self.press_radius = press_radius
        self.ee_lim = TABLE_HALF - EE_MARGIN

    @classmethod
    def from_config(cls, task: TaskSpec, cfg) -> "Tabletop":
        return cls(task, cfg.frame_size, cfg.grasp_radius, cfg.press_radius)

    # geometry -----------------------------------------------------------

    def to_pixel(self, x: float, y: float) -> tuple:
        return (x + TABLE_HALF) * self.ppm, (TABLE_HALF - y) * self.ppm

    def to_world(self, col: float, row: float) -> tuple:
        return col / self.ppm - TABLE_HALF, TABLE_HALF - row / self.ppm

    def pixel_rect(self, pose, extent) -> tuple:
        """Integer (r0, r1, c0, c1) raster footprint; the size never depends on position."""
        cx, cy = self.to_pixel(*pose)
        wpx = max(1, _round(extent[0] * self.ppm))
        hpx = max(1, _round(extent[1] * self.ppm))
        c0 = _round(cx - wpx / 2)
        r0 = _round(cy - hpx / 2)
        return r0, r0 + hpx, c0, c0 + wpx

    def box(self, pose, extent, label: str) -> Box2D:
        cx, cy = self.to_pixel(*pose)
        return Box2D(cx, cy, extent[0] * self.ppm, extent[1] * self.ppm, label).clamped(self.size, self.size)

    # reset --------------------------------------------------------------

    def reset(self, seed: int) -> tuple:
        rng = np.random.default_rng(seed)
        place = self.task.placement
        gap = place.get("min_gap", 0.03)
        for _ in range(MAX_PLACEMENT_TRIES):
            objs = self._try_place(rng, gap)
            if objs is None:
                continue
            ee = self._place_ee(rng, objs, gap, place.get("ee_min_dist", {}))
            if ee is None or not self._paths_clear(objs, ee, place):
                continue
            state = SceneState(ee_pose=ee, objects=tuple(objs))
            return state, self.render(state)
        raise PlacementError(f"could not place objects for {self.task.name} after {MAX_PLACEMENT_TRIES} tries")

    def _lim(self, extent) -> tuple:
        return (TABLE_HALF - max(extent[0] / 2, EE_MARGIN) - 0.01,
                TABLE_HALF - max(extent[1] / 2, EE_MARGIN) - 0.01)

    def _try_place(self, rng, gap):
        placed: list = []
        for tpl in self.task.objects:
            ext = tuple(tpl["extent"])
            lx, ly = self._lim(ext)
            if "beside" in tpl:
                # next to one side of a reference object, edge gap drawn from "gap"
                ref = next(o for o in placed if o.name == tpl["beside"])
                side = int(rng.integers(4))
                gap_ = rng.uniform(*tpl.get("gap", (gap, gap)))
                axis = side % 2
                sign = 1.0 if side < 2 else -1.0
                along = rng.uniform(-0.5, 0.5) * ref.extent[1 - axis]
                p = [0.0, 0.0]
                p[axis] = ref.pose[axis] + sign * (ref.extent[axis] / 2 + gap_ + ext[axis] / 2)
                p[1 - axis] = ref.pose[1 - axis] + along
                pose = tuple(p)
                if abs(pose[0]) > lx or abs(pose[1]) > ly:
                    return None
            else:
                pose = (rng.uniform(-lx, lx), rng.uniform(-ly, ly))
            pose = (float(pose[0]), float(pose[1]))
            if any(_overlap(pose, (ext[0] + gap, ext[1] + gap), o.pose, o.extent)
                   for o in placed if o.name != tpl.get("beside")):
                return None
            for other, d in tpl.get("min_dist", {}).items():
                ref = next(o for o in placed if o.name == other)
                if _dist(pose, ref.pose) < d:
                    return None
            grid = tuple(tpl.get("grid", (0, 0)))
            placed.append(SceneObject(
                name=tpl["name"],
                pose=pose,
                extent=ext,
                color=tuple(tpl["color"]),
                flags=frozenset(tpl.get("flags", ())),
                pressed_color=tuple(tpl["pressed_color"]) if "pressed_color" in tpl else None,
                grid=grid,
                cells=(True,) * (grid[0] * grid[1]),
            ))
        return placed

    @staticmethod
    def _paths_clear(objs, ee, place) -> bool:
        """Reject layouts where an obstacle sits within ``clearance`` of a listed straight path."""
        pos = {o.name: o.pose for o in objs}
        pos["ee"] = ee
        clearance = place.get("clearance", 0.0)
        for a, b in place.get("clear_paths", ()):
            p, q = np.asarray(pos[a]), np.asarray(pos[b])
            d = q - p
            for o in objs:
                if not o.has("obstacle"):
                    continue
                u = np.clip(np.dot(np.asarray(o.pose) - p, d) / max(np.dot(d, d), 1e-12), 0.0, 1.0)
                if np.linalg.norm(p + u * d - o.pose) < clearance:
                    return False
        return True

    def _place_ee(self, rng, objs, gap, min_dist):
        lim = self.ee_lim
        pose = (float(rng.uniform(-lim, lim)), float(rng.uniform(-lim, lim)))
        for o in objs:
            if o.has("flat") or o.has("wet"):
                continue
            if _overlap(pose, (EE_SIZE + gap, EE_SIZE + gap), o.pose, o.extent):
                return None
        for name, d in min_dist.items():
            if _dist(pose, next(o for o in objs if o.name == name).pose) < d:
                return None
        return pose

    # dynamics -----------------------------------------------------------

    def step(self, state: SceneState, a: Action) -> SceneState:
        old = state.ee_pose
        lim = self.ee_lim
        ee = (float(np.clip(old[0] + a.dx, -lim, lim)), float(np.clip(old[1] + a.dy, -lim, lim)))
        gripper, held = state.gripper, state.held
        objs = list(state.objects)

        if a.g == 1 and gripper == "open":
            gripper = "closed"
            best, best_d = None, self.grasp_radius
            for o in objs:
                d = _dist(ee, o.pose)
                if o.has("graspable") and d <= best_d:
                    best, best_d = o.name, d
            held = best
        elif a.g == 0 and gripper == "closed":
            gripper, held = "open", None

        violation = state.violation
        for i, o in enumerate(objs):
            if o.name == held:
                o = dataclasses.replace(o, pose=ee)
            if o.has("pressable"):
                was_in = _dist(old, o.pose) <= self.press_radius
                now_in = _dist(ee, o.pose) <= self.press_radius
                if now_in and not was_in:
                    o = dataclasses.replace(o, pressed=not o.pressed)
            objs[i] = o

        if held is not None:
            tool = next(o for o in objs if o.name == held)
            if tool.has("wiper"):
                for i, o in enumerate(objs):
                    if o.has("wet") and any(o.cells):
                        cells = tuple(
                            wet and not (abs(c[0] - ee[0]) <= tool.extent[0] / 2 and abs(c[1] - ee[1]) <= tool.extent[1] / 2)
                            for wet, c in zip(o.cells, o.cell_centers())
                        )
                        objs[i] = dataclasses.replace(o, cells=cells)

        footprints = [(ee, (EE_SIZE, EE_SIZE))]
        if held is not None:
            footprints.append((ee, next(o for o in objs if o.name == held).extent))
        for o in objs:
            if o.has("obstacle") and any(_overlap(p, e, o.pose, o.extent) for p, e in footprints):
                violation = True

        return SceneState(
            ee_pose=ee,
            ee_angle=state.ee_angle + a.rz,
            gripper=gripper,
            held=held,
            objects=tuple(objs),
            step=state.step + 1,
            violation=violation,
        )

    # rendering ----------------------------------------------------------

    def _fill(self, img, pose, extent, color):
        r0, r1, c0, c1 = self.pixel_rect(pose, extent)
        img[max(r0, 0):max(r1, 0), max(c0, 0):max(c1, 0)] = color

    def render(self, state: SceneState) -> Frame:
        img = np.empty((self.size, self.size, 3), dtype=np.uint8)
        img[:] = TABLE_COLOR
        flat = [o for o in state.objects if o.has("flat") or o.has("wet")]
        containers = [o for o in state.objects if o.has("container") and o not in flat]
        rest = [o for o in state.objects if o not in flat and o not in containers and o.name != state.held]
        for o in flat:
            if o.has("wet"):
                ce = o.cell_extent()
                for wet, c in zip(o.cells, o.cell_centers()):
                    if wet:
                        self._fill(img, c, ce, o.color)
            else:
                self._fill(img, o.pose, o.extent, o.color)
        for o in containers:
            self._fill(img, o.pose, o.extent, o.color)
            inner = (o.extent[0] * 0.6, o.extent[1] * 0.6)
            self._fill(img, o.pose, inner, tuple(min(255, c + 60) for c in o.color))
        for o in rest:
            color = o.pressed_color if (o.pressed and o.pressed_color) else o.color
            self._fill(img, o.pose, o.extent, color)
        if state.held is not None:
            h = state.obj(state.held)
            self._fill(img, h.pose, h.extent, h.color)
        r0, r1, c0, c1 = self.pixel_rect(state.ee_pose, (EE_SIZE, EE_SIZE))
        if state.gripper == "closed":
            img[r0:r1, c0:c1] = EE_COLOR
        else:
            b = EE_BORDER_PX
            img[r0:r0 + b, c0:c1] = EE_COLOR
            img[r1 - b:r1, c0:c1] = EE_COLOR
            img[r0:r1, c0:c0 + b] = EE_COLOR
            img[r0:r1, c1 - b:c1] = EE_COLOR
        return Frame(img, state.step)

    # goal and oracle boxes --------------------------------------------------

    def goal_state(self, state: SceneState) -> SceneState:
        """The scene after the task is solved, used to render the goal image."""
        rule = self.task.success_rule
        kind = rule["kind"]
        s = dataclasses.replace(state, held=None, gripper="open", violation=False)
        if kind == "press":
            b = s.obj(rule["object"])
            return dataclasses.replace(s.replace_obj(dataclasses.replace(b, pressed=True)), ee_pose=b.pose)
        if kind == "place":
            for o, t in rule["pairs"]:
                s = s.replace_obj(dataclasses.replace(s.obj(o), pose=s.obj(t).pose))
            return dataclasses.replace(s, ee_pose=s.obj(rule["pairs"][-1][1]).pose)
        if kind == "wipe":
            patch = s.obj(rule["patch"])
            s = s.replace_obj(dataclasses.replace(patch, cells=(False,) * len(patch.cells)))
            s = s.replace_obj(dataclasses.replace(s.obj(rule["tool"]), pose=patch.pose))
            return dataclasses.replace(s, ee_pose=patch.pose, held=rule["tool"], gripper="closed")
        raise ValueError(kind)

    def goal_image(self, state: SceneState) -> Frame:
        return self.render(self.goal_state(state))

    def subgoal_target(self, state: SceneState) -> tuple:
        """World position and extent of the active sub-goal (remaining wet cells for a patch)."""
        o = state.obj(self.task.active_subgoal(state))
        if o.has("wet") and any(o.cells):
            centers = o.cell_centers()[np.array(o.cells)]
            cw, ch = o.cell_extent()
            lo = centers.min(axis=0) - (cw / 2, ch / 2)
            hi = centers.max(axis=0) + (cw / 2, ch / 2)
            return tuple(float(v) for v in (lo + hi) / 2), tuple(float(v) for v in hi - lo)
        return o.pose, o.extent

    def ground_truth_boxes(self, state: SceneState) -> tuple:
        e = self.box(state.ee_pose, (EE_SIZE, EE_SIZE), "end_effector")
        pose, ext = self.subgoal_target(state)
        s = self.box(pose, ext, "sub_goal")
        interference = [self.box(o.pose, o.extent, "interference") for o in state.objects if o.has("obstacle")]
        return e, s, interference


def ground_truth_boxes(state: SceneState, task: TaskSpec, frame_size: int = 64) -> tuple:
    return Tabletop(task, frame_size).ground_truth_boxes(state)


