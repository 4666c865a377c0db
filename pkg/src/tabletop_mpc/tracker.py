"""Box propagation through a predicted video by normalized cross-correlation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import cv2
import numpy as np

from .core import Box2D, Frame
from .vlm import SceneUnderstanding

cv2.setNumThreads(1)


def _round(v: float) -> int:
    return int(np.floor(v + 0.5))


@dataclass
class _Track:
    box: Box2D
    template: np.ndarray
    offset: tuple  # box centre minus template top-left (col, row)
    velocity: tuple = (0.0, 0.0)


class TemplateTracker:
    """NCC template tracker.

    The peak is picked on ``ncc - motion_penalty * (d / search_window)**2`` so that a
    distractor inside the window only wins when it correlates clearly better than the
    patch near the previous position; acceptance still uses the raw NCC score.

    By default templates are cut once from the reference frame (``refresh=False``):
    refreshing every frame lets a template drift onto whatever occludes it, which for
    small objects under the gripper is the common case. On a miss the end effector
    coasts at its last velocity while scene objects hold still (``coast_all=True``
    coasts every box).
    """

    def __init__(self, search_window: int = 12, threshold: float = 0.5, margin: int = 2,
                 motion_penalty: float = 0.3, refresh: bool = False, coast_all: bool = False):
        self.window = search_window
        self.threshold = threshold
        self.margin = margin
        self.motion_penalty = motion_penalty
        self.refresh = refresh
        self.coast_all = coast_all

    def _template(self, img: np.ndarray, box: Box2D):
        h, w = img.shape[:2]
        m = self.margin
        wpx, hpx = max(1, _round(box.w)), max(1, _round(box.h))
        c0 = max(_round(box.cx - wpx / 2) - m, 0)
        r0 = max(_round(box.cy - hpx / 2) - m, 0)
        c1 = min(_round(box.cx - wpx / 2) + wpx + m, w)
        r1 = min(_round(box.cy - hpx / 2) + hpx + m, h)
        return img[r0:r1, c0:c1].copy(), (box.cx - c0, box.cy - r0)

    def _start(self, img: np.ndarray, box: Box2D) -> _Track:
        tpl, off = self._template(img, box)
        return _Track(box, tpl, off)

    def _advance(self, tr: _Track, img: np.ndarray) -> tuple:
        h, w = img.shape[:2]
        th, tw = tr.template.shape[:2]
        # template top-left if nothing moved
        ec, er = tr.box.cx - tr.offset[0], tr.box.cy - tr.offset[1]
        tl_c, tl_r = _round(ec), _round(er)
        r0, c0 = max(tl_r - self.window, 0), max(tl_c - self.window, 0)
        r1, c1 = min(tl_r + th + self.window, h), min(tl_c + tw + self.window, w)
        score = -1.0
        if r1 - r0 >= th and c1 - c0 >= tw and th > 0 and tw > 0:
            res = cv2.matchTemplate(img[r0:r1, c0:c1], tr.template, cv2.TM_CCOEFF_NORMED)
            res = np.nan_to_num(res, nan=-1.0)
            rr, cc = np.mgrid[0:res.shape[0], 0:res.shape[1]]
            d2 = ((rr + r0 - er) ** 2 + (cc + c0 - ec) ** 2) / float(max(self.window, 1)) ** 2
            idx = int(np.argmax(res - self.motion_penalty * d2))
            score = float(res.flat[idx])
            pr, pc = divmod(idx, res.shape[1])
        if score >= self.threshold:
            cx, cy = c0 + pc + tr.offset[0], r0 + pr + tr.offset[1]
            box = dataclasses.replace(tr.box, cx=cx, cy=cy).clamped(w, h)
            vel = (box.cx - tr.box.cx, box.cy - tr.box.cy)
            if self.refresh:
                tpl, off = self._template(img, box)
            else:
                tpl, off = tr.template, tr.offset
            return _Track(box, tpl, off, vel), False
        if self.coast_all or tr.box.label == "end_effector":
            vel = tr.velocity
        else:
            vel = (0.0, 0.0)
        box = dataclasses.replace(tr.box, cx=tr.box.cx + vel[0], cy=tr.box.cy + vel[1]).clamped(w, h)
        return _Track(box, tr.template, tr.offset, vel), True

    def track_boxes(self, frames, init_boxes, ref: Frame) -> list:
        """Per-frame (boxes, low_confidence) for an arbitrary list of boxes."""
        tracks = [self._start(ref.pixels, b) for b in init_boxes]
        out = []
        for f in frames:
            img = f.pixels
            step = [self._advance(tr, img) for tr in tracks]
            tracks = [s[0] for s in step]
            out.append(([t.box for t in tracks], tuple(s[1] for s in step)))
        return out

    def track(self, video, init: SceneUnderstanding, ref: Frame) -> list:
        """Re-localize ``init`` (valid in ``ref``) in every frame of ``video``."""
        per_frame = self.track_boxes(video.frames, init.boxes(), ref)
        return [
            SceneUnderstanding(boxes[0], boxes[1], tuple(boxes[2:]), low_confidence=flags)
            for boxes, flags in per_frame
        ]
