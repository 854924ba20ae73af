"""Pair-eye image composition and the detection quality gate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .cascade import FaceLandmarks, Rejection
from .imaging import GrayImage, Rect, crop, resize

PAIR_SIZE = 72
HALF_HEIGHT = PAIR_SIZE // 2
CROP_MARGIN = 0.10
MIN_EYE_W, MIN_EYE_H = 24, 12


class CompositionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PairEyeImage:
    """72x72 grayscale image: image-left eye on top, image-right eye below."""

    image: GrayImage
    frame_id: str = ""
    person_id: str = ""

    def __post_init__(self):
        if (self.image.width, self.image.height) != (PAIR_SIZE, PAIR_SIZE):
            raise CompositionError(
                f"pair-eye image must be {PAIR_SIZE}x{PAIR_SIZE}, "
                f"got {self.image.width}x{self.image.height}")

    @property
    def pixels(self) -> np.ndarray:
        return self.image.pixels

    def file_name(self, label: int) -> str:
        return f"{self.person_id}_{self.frame_id}_{label}.pgm"


def expand_rect(r: Rect, width: int, height: int, margin: float = CROP_MARGIN) -> Rect:
    """Grow ``r`` by ``margin`` of its size on every side, clamped to the frame."""
    mx = int(math.floor(r.w * margin + 0.5))
    my = int(math.floor(r.h * margin + 0.5))
    x0, y0 = max(0, r.x - mx), max(0, r.y - my)
    x1, y1 = min(width, r.right + mx), min(height, r.bottom + my)
    if x1 <= x0 or y1 <= y0:
        raise CompositionError(f"eye rect {r} is empty after clamping")
    return Rect(x0, y0, x1 - x0, y1 - y0)


def eye_tile(frame: GrayImage, eye: Rect) -> GrayImage:
    box = expand_rect(eye, frame.width, frame.height)
    return resize(crop(frame, box), PAIR_SIZE, HALF_HEIGHT)


def compose_pair(frame: GrayImage, lm: FaceLandmarks, frame_id: str = "",
                 person_id: str = "") -> PairEyeImage:
    top = eye_tile(frame, lm.left_eye)
    bottom = eye_tile(frame, lm.right_eye)
    stacked = np.vstack([top.pixels, bottom.pixels])
    return PairEyeImage(GrayImage(stacked), frame_id, person_id)


@dataclass(frozen=True)
class GateResult:
    accepted: bool
    reason: str | None = None


def quality_gate(result: Union[FaceLandmarks, Rejection]) -> GateResult:
    if isinstance(result, Rejection):
        return GateResult(False, result.reason)
    for eye in (result.left_eye, result.right_eye):
        if eye.w < MIN_EYE_W or eye.h < MIN_EYE_H:
            return GateResult(False, "eye_too_small")
    return GateResult(True)
