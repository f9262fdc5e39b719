"""The seven image metamorphic relations and their parameter grids.

Geometric relations use continuous pixel coordinates with the origin at
the top-left corner of the top-left pixel (pixel ``(row, col)`` covers
``[col, col+1) x [row, row+1)``).  Positive rotation angles turn the
image clockwise on screen.  Shear is horizontal about the centre row.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .images import RasterImage


class MR(str, Enum):
    BLUR = "Blur"
    FLIP_LR = "FlipLR"
    FLIP_UD = "FlipUD"
    GRAYSCALE = "Grayscale"
    INVERT = "Invert"
    ROTATION = "Rotation"
    SHEAR = "Shear"

    @property
    def parameterized(self) -> bool:
        return self in (MR.ROTATION, MR.SHEAR)

    @property
    def geometric(self) -> bool:
        return self in (MR.FLIP_LR, MR.FLIP_UD, MR.ROTATION, MR.SHEAR)

    @classmethod
    def parse(cls, name) -> "MR":
        if isinstance(name, MR):
            return name
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown metamorphic relation {name!r}") from None


# main-bandit arm order
MR_ORDER: tuple[MR, ...] = tuple(MR)

GRID_STEP = 5


def _signed_grid(limit: int) -> tuple[int, ...]:
    steps = range(GRID_STEP, limit + 1, GRID_STEP)
    return tuple(sorted([-s for s in steps] + list(steps)))


ROTATION_GRID = _signed_grid(90)
SHEAR_GRID = _signed_grid(45)


def rotation_grid() -> tuple[int, ...]:
    return ROTATION_GRID


def shear_grid() -> tuple[int, ...]:
    return SHEAR_GRID


def param_grid(mr) -> tuple[int, ...]:
    mr = MR.parse(mr)
    if mr is MR.ROTATION:
        return ROTATION_GRID
    if mr is MR.SHEAR:
        return SHEAR_GRID
    raise ValueError(f"{mr.value} takes no parameter")


def check_param(mr, param) -> None:
    """Raise ValueError unless ``param`` is valid for ``mr``."""
    mr = MR.parse(mr)
    if mr.parameterized:
        if param is None or param not in param_grid(mr):
            raise ValueError(f"{mr.value} parameter {param!r} is not on its grid")
    elif param is not None:
        raise ValueError(f"{mr.value} takes no parameter, got {param!r}")


def registry_signature() -> str:
    """Stable description of the MR set and grids; hashed into snapshots and logs."""
    parts = [m.value for m in MR_ORDER]
    parts.append("Rotation:" + ",".join(map(str, ROTATION_GRID)))
    parts.append("Shear:" + ",".join(map(str, SHEAR_GRID)))
    return "|".join(parts)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_list()}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, coords) -> "BoundingBox":
        x0, y0, x1, y1 = (float(c) for c in coords)
        return cls(x0, y0, x1, y1)


# ----------------------------------------------------------------- pixels

LUMA = np.array([0.299, 0.587, 0.114])


def _blur(px: np.ndarray) -> np.ndarray:
    h, w, _ = px.shape
    padded = np.zeros((h + 2, w + 2, 3))
    padded[1:-1, 1:-1] = px
    ones = np.zeros((h + 2, w + 2))
    ones[1:-1, 1:-1] = 1.0
    total = np.zeros((h, w, 3))
    count = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            total += padded[dy:dy + h, dx:dx + w]
            count += ones[dy:dy + h, dx:dx + w]
    return np.rint(total / count[..., None])


def _grayscale(px: np.ndarray) -> np.ndarray:
    luma = np.rint(px.astype(np.float64) @ LUMA)
    return np.repeat(luma[..., None], 3, axis=2)


def _inverse_affine(mr: MR, param: int, w: int, h: int):
    """Matrix mapping output coordinates (x', y') back to input (x, y) around the centre."""
    theta = math.radians(param)
    if mr is MR.ROTATION:
        c, s = math.cos(theta), math.sin(theta)
        # forward: [x'; y'] = [[c, -s], [s, c]] [x; y]; inverse is the transpose
        return np.array([[c, s], [-s, c]])
    t = math.tan(theta)
    return np.array([[1.0, -t], [0.0, 1.0]])


def _forward_affine(mr: MR, param: int) -> np.ndarray:
    theta = math.radians(param)
    if mr is MR.ROTATION:
        c, s = math.cos(theta), math.sin(theta)
        return np.array([[c, -s], [s, c]])
    return np.array([[1.0, math.tan(theta)], [0.0, 1.0]])


def _right_angle_turns(mr: MR, param, w: int, h: int) -> int | None:
    """Clockwise quarter turns when a rotation is an exact pixel permutation."""
    if mr is MR.ROTATION and w == h and param % 90 == 0:
        return (param // 90) % 4
    return None


@lru_cache(maxsize=512)
def _warp_plan(mr: MR, param: int, w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat source indices and bilinear weights, (4, h*w) each; index h*w is the black fill."""
    cx, cy = w / 2.0, h / 2.0
    inv = _inverse_affine(mr, param, w, h)
    ys, xs = np.mgrid[0:h, 0:w]
    ox = xs + 0.5 - cx
    oy = ys + 0.5 - cy
    sx = inv[0, 0] * ox + inv[0, 1] * oy + cx - 0.5
    sy = inv[1, 0] * ox + inv[1, 1] * oy + cy - 0.5
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    indices, weights = [], []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            indices.append(np.where(inside, yy * w + xx, h * w).ravel())
            weights.append((wy * wx).ravel())
    idx, wts = np.array(indices), np.array(weights)
    idx.setflags(write=False)
    wts.setflags(write=False)
    return idx, wts


def _warp(px: np.ndarray, mr: MR, param: int) -> np.ndarray:
    h, w, _ = px.shape
    idx, wts = _warp_plan(mr, param, w, h)
    flat = np.zeros((h * w + 1, 3))
    flat[:-1] = px.reshape(-1, 3)
    out = np.einsum("kp,kpc->pc", wts, flat[idx])
    return np.rint(out).reshape(h, w, 3)


def apply_mr(mr, param, image: RasterImage) -> RasterImage:
    """Follow-up image for ``image`` under relation ``mr`` configured by ``param``."""
    mr = MR.parse(mr)
    check_param(mr, param)
    px = image.pixels
    if mr is MR.BLUR:
        out = _blur(px)
    elif mr is MR.FLIP_LR:
        out = px[:, ::-1]
    elif mr is MR.FLIP_UD:
        out = px[::-1]
    elif mr is MR.GRAYSCALE:
        out = _grayscale(px)
    elif mr is MR.INVERT:
        out = 255 - px
    else:
        turns = _right_angle_turns(mr, param, image.width, image.height)
        if turns is not None:
            out = np.rot90(px, k=-turns)
        else:
            out = _warp(px, mr, param)
    return RasterImage(np.ascontiguousarray(np.clip(out, 0, 255).astype(np.uint8)))


# ------------------------------------------------------------------ boxes

def map_points(mr, param, points: np.ndarray, width: int, height: int) -> np.ndarray:
    """Apply the geometric map of ``mr`` to continuous ``(x, y)`` points."""
    mr = MR.parse(mr)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if mr is MR.FLIP_LR:
        return np.column_stack([width - pts[:, 0], pts[:, 1]])
    if mr is MR.FLIP_UD:
        return np.column_stack([pts[:, 0], height - pts[:, 1]])
    if not mr.geometric:
        return pts.copy()
    turns = _right_angle_turns(mr, param, width, height)
    if turns is not None:
        x, y = pts[:, 0], pts[:, 1]
        for _ in range(turns):
            # clockwise quarter turn of a square canvas of side `width`
            x, y = width - y, x
        return np.column_stack([x, y])
    centre = np.array([width / 2.0, height / 2.0])
    return (pts - centre) @ _forward_affine(mr, param).T + centre


def transform_boxes(mr, param, boxes, width: int, height: int) -> list[BoundingBox]:
    """Co-transform boxes with the image; hull, clip, and drop empty results."""
    mr = MR.parse(mr)
    check_param(mr, param)
    if not mr.geometric:
        return list(boxes)
    out = []
    for box in boxes:
        corners = np.array([[box.x_min, box.y_min], [box.x_max, box.y_min],
                            [box.x_min, box.y_max], [box.x_max, box.y_max]])
        mapped = map_points(mr, param, corners, width, height)
        x0 = min(max(float(mapped[:, 0].min()), 0.0), float(width))
        x1 = min(max(float(mapped[:, 0].max()), 0.0), float(width))
        y0 = min(max(float(mapped[:, 1].min()), 0.0), float(height))
        y1 = min(max(float(mapped[:, 1].max()), 0.0), float(height))
        if x1 > x0 and y1 > y0:
            out.append(BoundingBox(x0, y0, x1, y1))
    return out
