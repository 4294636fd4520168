"""Scene sampling and rasterization.

Boxes are inclusive integer pixel boxes ``(x0, y0, x1, y1)``; an object
covers columns ``x0..x1`` and rows ``y0..y1``. Placement keeps boxes
pixel-disjoint, so pairwise IoU is exactly zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
RGB = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
BACKGROUND = (255, 255, 255)
MASK_GRAY = (128, 128, 128)

MIN_SIDE = 8
MAX_OBJECTS = 4
PLACEMENT_RETRIES = 1000


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    bbox: tuple[int, int, int, int]

    @property
    def x_center(self) -> float:
        return (self.bbox[0] + self.bbox[2]) / 2

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "bbox": list(self.bbox)}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(d["shape"], d["color"], tuple(int(v) for v in d["bbox"]))


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int]  # (H, W)
    objects: tuple[SceneObject, ...]
    # occluded rectangle drawn in mid-gray, set only for masked-image samples
    mask: Optional[tuple[int, int, int, int]] = field(default=None)

    def with_mask(self, box) -> "SceneSpec":
        return replace(self, mask=tuple(int(v) for v in box))

    def to_dict(self) -> dict:
        return {
            "canvas": list(self.canvas),
            "objects": [o.to_dict() for o in self.objects],
            "mask": None if self.mask is None else list(self.mask),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        mask = d.get("mask")
        return cls(
            tuple(int(v) for v in d["canvas"]),
            tuple(SceneObject.from_dict(o) for o in d["objects"]),
            None if mask is None else tuple(int(v) for v in mask),
        )


def boxes_disjoint(a, b) -> bool:
    return a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1]


def _place(rng: np.random.Generator, n: int, h: int, w: int, max_side: int):
    boxes = []
    for _ in range(PLACEMENT_RETRIES):
        side = int(rng.integers(MIN_SIDE + 2, max_side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        y0 = int(rng.integers(0, h - side + 1))
        box = (x0, y0, x0 + side - 1, y0 + side - 1)
        if all(boxes_disjoint(box, b) for b in boxes):
            boxes.append(box)
            if len(boxes) == n:
                return boxes
    return None


def sample_scene(rng_seed, canvas: tuple[int, int] = (64, 64)) -> SceneSpec:
    """Deterministic random scene of 1-4 non-overlapping objects.

    Placement draws boxes one at a time and rejects overlaps. If it gives
    up after ``PLACEMENT_RETRIES`` draws the object count is reduced and
    placement restarts; on a 64x64 canvas a single object always fits.
    """
    rng = np.random.default_rng(rng_seed)
    h, w = canvas
    if min(h, w) < MIN_SIDE + 2:
        raise ValueError(f"canvas {canvas} too small")
    max_side = max(MIN_SIDE + 2, min(h, w) * 3 // 8)
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    while True:
        boxes = _place(rng, n, h, w, max_side)
        if boxes is not None:
            break
        n -= 1
    objects = tuple(
        SceneObject(SHAPES[int(rng.integers(len(SHAPES)))], COLORS[int(rng.integers(len(COLORS)))], box)
        for box in boxes
    )
    return SceneSpec((h, w), objects)


def shape_mask(shape: str, bbox) -> np.ndarray:
    """Boolean coverage of ``shape`` over its own bbox, shape (rows, cols)."""
    x0, y0, x1, y1 = bbox
    side_w, side_h = x1 - x0 + 1, y1 - y0 + 1
    yy, xx = np.mgrid[0:side_h, 0:side_w]
    cx, cy = (side_w - 1) / 2, (side_h - 1) / 2
    if shape == "square":
        return np.ones((side_h, side_w), dtype=bool)
    if shape == "circle":
        r = min(side_w, side_h) / 2
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "triangle":
        # apex at top-center, base along the bottom row
        frac = (yy + 1) / side_h
        return np.abs(xx - cx) <= frac * side_w / 2
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(scene: SceneSpec) -> np.ndarray:
    h, w = scene.canvas
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for obj in scene.objects:
        x0, y0, x1, y1 = obj.bbox
        region = img[y0 : y1 + 1, x0 : x1 + 1]
        region[shape_mask(obj.shape, obj.bbox)] = RGB[obj.color]
    if scene.mask is not None:
        x0, y0, x1, y1 = scene.mask
        img[y0 : y1 + 1, x0 : x1 + 1] = MASK_GRAY
    return img
