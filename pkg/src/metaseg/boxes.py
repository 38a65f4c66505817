"""Axis-aligned boxes in continuous pixel coordinates.

Pixel ``i`` covers the interval ``[i, i + 1)``, so a mask whose foreground
occupies columns ``a..b`` has the tight box ``x0 = a, x1 = b + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import BoxError


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    score: Optional[float] = None

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise BoxError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise BoxError(f"box needs positive extent, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x0, y0, x1, y1, score=None) -> "Box":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0, score)

    @classmethod
    def full_frame(cls, height: int, width: int) -> "Box":
        return cls(width / 2.0, height / 2.0, float(width), float(height))

    @classmethod
    def from_mask(cls, mask) -> Optional["Box"]:
        """Tight box around the foreground of a binary mask, or None if empty."""
        mask = np.asarray(mask, dtype=bool)
        rows = np.flatnonzero(mask.any(axis=1))
        if rows.size == 0:
            return None
        cols = np.flatnonzero(mask.any(axis=0))
        return cls.from_corners(float(cols[0]), float(rows[0]),
                                float(cols[-1] + 1), float(rows[-1] + 1))

    @property
    def corners(self):
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def clip(self, height: int, width: int) -> "Box":
        """Intersect with the frame; raises BoxError if nothing is left."""
        x0, y0, x1, y1 = self.corners
        x0, x1 = max(x0, 0.0), min(x1, float(width))
        y0, y1 = max(y0, 0.0), min(y1, float(height))
        if x1 <= x0 or y1 <= y0:
            raise BoxError(f"box {self.corners} lies outside the {height}x{width} frame")
        return Box.from_corners(x0, y0, x1, y1, self.score)

    def scaled(self, factor: float) -> "Box":
        """Same center, extents multiplied by ``factor``."""
        return replace(self, w=self.w * factor, h=self.h * factor)

    def with_score(self, score: Optional[float]) -> "Box":
        return replace(self, score=score)

    def iou(self, other: "Box") -> float:
        ax0, ay0, ax1, ay1 = self.corners
        bx0, by0, bx1, by1 = other.corners
        iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0.0, min(ay1, by1) - max(ay0, by0))
        inter = iw * ih
        return inter / (self.area + other.area - inter)

    def normalized(self, height: int, width: int) -> np.ndarray:
        """(cx, cy, log w, log h) normalised by the frame size."""
        return np.array([self.cx / width, self.cy / height,
                         math.log(self.w / width), math.log(self.h / height)])

    @classmethod
    def from_normalized(cls, params, height: int, width: int, score=None) -> "Box":
        cx, cy, lw, lh = (float(v) for v in params)
        return cls(cx * width, cy * height, math.exp(lw) * width, math.exp(lh) * height, score)

    def as_tuple(self):
        return (self.cx, self.cy, self.w, self.h)


def jitter_boxes(box: Box, n: int, shift_sigma: float, scale_sigma: float,
                 rng: np.random.Generator, frame_size=None) -> list:
    """``n`` copies of ``box`` with Gaussian centre shifts and log-scale noise.

    Shifts are relative to the box extent. With ``frame_size`` the copies are
    clipped to the frame; a copy that would leave the frame is replaced by
    the clipped original.
    """
    out = []
    for _ in range(n):
        dx, dy, sw, sh = rng.normal(size=4)
        cand = Box(box.cx + dx * shift_sigma * box.w, box.cy + dy * shift_sigma * box.h,
                   box.w * math.exp(sw * scale_sigma), box.h * math.exp(sh * scale_sigma))
        if frame_size is not None:
            try:
                cand = cand.clip(*frame_size)
            except BoxError:
                cand = box.clip(*frame_size)
            if cand.w < 1.0 or cand.h < 1.0:
                cand = box.clip(*frame_size)
        out.append(cand)
    return out
