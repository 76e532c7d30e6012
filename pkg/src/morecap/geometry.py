"""Axis-aligned 3D box math.

Extents map to axes as l -> x, w -> y, h -> z. Corners are ordered
``4*ix + 2*iy + iz`` where each bit picks the minus (0) or plus (1) side.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

_SIGNS = np.array(list(itertools.product((-0.5, 0.5), repeat=3)))  # (8, 3): x, y, z


@dataclass(frozen=True)
class Box3:
    cx: float
    cy: float
    cz: float
    h: float
    w: float
    l: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.h, self.w, self.l)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box fields must be finite, got {vals}")
        if min(self.h, self.w, self.l) <= 0:
            raise ValueError(f"box extents must be positive, got h={self.h} w={self.w} l={self.l}")

    @classmethod
    def from_list(cls, values) -> "Box3":
        cx, cy, cz, h, w, l = (float(v) for v in values)
        return cls(cx, cy, cz, h, w, l)

    def to_list(self) -> list[float]:
        return [self.cx, self.cy, self.cz, self.h, self.w, self.l]

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def extents_xyz(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    @property
    def z_min(self) -> float:
        return self.cz - self.h / 2

    @property
    def z_max(self) -> float:
        return self.cz + self.h / 2


def corners(box: Box3) -> np.ndarray:
    """The 8 corner points as an (8, 3) array."""
    return box.center + _SIGNS * box.extents_xyz


def vertical_distances(box_j: Box3, box_i: Box3) -> np.ndarray:
    """All 64 corner-pair z differences, ``d[8*a + b] = z(j_a) - z(i_b)``."""
    zj = corners(box_j)[:, 2]
    zi = corners(box_i)[:, 2]
    return (zj[:, None] - zi[None, :]).reshape(64)


VERTICAL_NONE, VERTICAL_TOP, VERTICAL_BOTTOM = 0, 1, 2
VERTICAL_NAMES = {VERTICAL_NONE: "none", VERTICAL_TOP: "top", VERTICAL_BOTTOM: "bottom"}


def vertical_case(box_j: Box3, box_i: Box3) -> int:
    """TOP when every corner of j is above every corner of i, BOTTOM when below."""
    d = vertical_distances(box_j, box_i)
    if d.min() > 0:
        return VERTICAL_TOP
    if d.max() < 0:
        return VERTICAL_BOTTOM
    return VERTICAL_NONE


def iou3d(a: Box3, b: Box3) -> float:
    lo = np.maximum(a.center - a.extents_xyz / 2, b.center - b.extents_xyz / 2)
    hi = np.minimum(a.center + a.extents_xyz / 2, b.center + b.extents_xyz / 2)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    if inter <= 0.0:
        return 0.0
    va = a.h * a.w * a.l
    vb = b.h * b.w * b.l
    return min(1.0, inter / (va + vb - inter))


def knn_graph(boxes: list[Box3], k: int) -> list[list[int]]:
    """Neighbor lists by center distance, nearest first; ties go to the lower index."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    n = len(boxes)
    if n < 2:
        return [[] for _ in range(n)]
    centers = np.array([b.center for b in boxes])
    d2 = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    out = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: (d2[i, j], j))
        out.append(others[: min(k, n - 1)])
    return out


def relative_offset(box_j: Box3, box_i: Box3) -> tuple[float, float]:
    return box_j.cx - box_i.cx, box_j.cy - box_i.cy
