"""Raster-mask and point geometry.

Coordinate conventions used throughout the engine:

* image grids are row-major with x rightward and y downward, origin top-left;
* a mask centroid is the arithmetic mean of the integer (x, y) indices of the
  foreground pixels, so a single pixel at (3, 7) has centroid (3.0, 7.0);
* polygon rasterization marks pixel (x, y) foreground iff the point
  (x + 0.5, y + 0.5) lies inside the polygon under the even-odd rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateAxis, DegeneratePolygon, EmptyMask


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class Axis:
    """Oriented line through ``origin`` with unit ``direction``."""

    origin: Point2D
    direction: tuple[float, float]

    def __post_init__(self):
        dx, dy = self.direction
        norm = math.sqrt(dx * dx + dy * dy)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"direction norm {norm} not unit")

    def project(self, p: Point2D) -> float:
        return (p.x - self.origin.x) * self.direction[0] + (p.y - self.origin.y) * self.direction[1]

    def flipped(self) -> "Axis":
        return Axis(self.origin, (-self.direction[0], -self.direction[1]))


@dataclass
class BinaryMask:
    """Boolean raster with an integer offset into the parent image grid."""

    bits: np.ndarray
    offset: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.bool_)
        if self.bits.ndim != 2:
            raise ValueError("mask bits must be 2-D")
        self.offset = (int(self.offset[0]), int(self.offset[1]))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return not self.bits.any()

    def contains(self, p: Point2D) -> bool:
        """Whether the pixel nearest to p is foreground."""
        ix = math.floor(p.x + 0.5) - self.offset[0]
        iy = math.floor(p.y + 0.5) - self.offset[1]
        if 0 <= ix < self.width and 0 <= iy < self.height:
            return bool(self.bits[iy, ix])
        return False

    def bbox(self) -> tuple[int, int, int, int]:
        """Tight (x0, y0, x1, y1) of foreground in parent coordinates, x1/y1 exclusive."""
        ys, xs = np.nonzero(self.bits)
        if ys.size == 0:
            raise EmptyMask("bbox of empty mask")
        ox, oy = self.offset
        return (ox + int(xs.min()), oy + int(ys.min()), ox + int(xs.max()) + 1, oy + int(ys.max()) + 1)

    def cropped(self) -> "BinaryMask":
        """Copy cropped to the tight bounding box."""
        x0, y0, x1, y1 = self.bbox()
        ox, oy = self.offset
        return BinaryMask(self.bits[y0 - oy:y1 - oy, x0 - ox:x1 - ox].copy(), (x0, y0))

    def translated(self, dx: int, dy: int) -> "BinaryMask":
        return BinaryMask(self.bits, (self.offset[0] + int(dx), self.offset[1] + int(dy)))

    def to_full(self, width: int, height: int) -> np.ndarray:
        """Render onto a full parent grid, clipping anything out of bounds."""
        full = np.zeros((height, width), dtype=np.bool_)
        ox, oy = self.offset
        x_lo, x_hi = max(0, ox), min(width, ox + self.width)
        y_lo, y_hi = max(0, oy), min(height, oy + self.height)
        if x_lo < x_hi and y_lo < y_hi:
            full[y_lo:y_hi, x_lo:x_hi] = self.bits[y_lo - oy:y_hi - oy, x_lo - ox:x_hi - ox]
        return full


@dataclass
class Patch:
    """Grayscale window cut from an image, with its recorded offset."""

    pixels: np.ndarray
    offset: tuple[int, int]

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def centroid(mask: BinaryMask) -> Point2D:
    """Mean foreground coordinate in parent-image coordinates."""
    ys, xs = np.nonzero(mask.bits)
    if ys.size == 0:
        raise EmptyMask("centroid of empty mask")
    # sum parent-grid integer coordinates: exact in float64, so the result is
    # bit-identical to any other enumeration of the same pixel set
    ox, oy = mask.offset
    sx = int(xs.sum()) + ox * ys.size
    sy = int(ys.sum()) + oy * ys.size
    return Point2D(sx / ys.size, sy / ys.size)


def _counts(a: BinaryMask, b: BinaryMask) -> tuple[int, int, int]:
    dx = b.offset[0] - a.offset[0]
    dy = b.offset[1] - a.offset[1]
    return kernels.overlap_counts(a.bits, b.bits, dx, dy)


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Dice similarity 2|AnB| / (|A|+|B|); raises on two empty masks."""
    na, nb, inter = _counts(a, b)
    if na + nb == 0:
        raise EmptyMask("dice of two empty masks")
    return 2.0 * inter / (na + nb)


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; 0 when the union is empty."""
    na, nb, inter = _counts(a, b)
    union = na + nb - inter
    if union == 0:
        return 0.0
    return inter / union


def principal_axis(points: list[Point2D]) -> Axis:
    """First principal component of the points, as an oriented axis.

    The direction sign is fixed so dy >= 0 (and dx > 0 when dy == 0), i.e.
    ascending projection moves down the image for near-vertical layouts.
    """
    if len(points) < 2:
        raise DegenerateAxis("need at least 2 points")
    n = len(points)
    mx = sum(p.x for p in points) / n
    my = sum(p.y for p in points) / n
    sxx = sxy = syy = 0.0
    for p in points:
        dx = p.x - mx
        dy = p.y - my
        sxx += dx * dx
        sxy += dx * dy
        syy += dy * dy
    if sxx == 0.0 and sxy == 0.0 and syy == 0.0:
        raise DegenerateAxis("all points coincide")
    # closed-form dominant eigenvector of the 2x2 covariance
    half_trace = 0.5 * (sxx + syy)
    det = sxx * syy - sxy * sxy
    lam = half_trace + math.sqrt(max(half_trace * half_trace - det, 0.0))
    v1 = (lam - syy, sxy)
    v2 = (sxy, lam - sxx)
    dx, dy = v1 if (v1[0] * v1[0] + v1[1] * v1[1]) >= (v2[0] * v2[0] + v2[1] * v2[1]) else v2
    norm = math.sqrt(dx * dx + dy * dy)
    if norm == 0.0:
        # isotropic cloud: any direction is principal, pick +y
        dx, dy = 0.0, 1.0
        norm = 1.0
    dx, dy = dx / norm, dy / norm
    if dy < 0.0 or (dy == 0.0 and dx < 0.0):
        dx, dy = -dx, -dy
    return Axis(Point2D(mx, my), (dx, dy))


def sort_by_projection(points: list[Point2D], axis: Axis) -> list[int]:
    """Indices ordered by ascending scalar projection; ties by (y, x)."""
    keyed = [(axis.project(p), p.y, p.x, i) for i, p in enumerate(points)]
    keyed.sort(key=lambda t: (t[0], t[1], t[2]))
    return [t[3] for t in keyed]


def extract_patch(image: np.ndarray, center: Point2D, size: int) -> Patch:
    """size x size window centered (rounded) at center, zero-padded at borders."""
    if size < 1:
        raise ValueError("patch size must be >= 1")
    h, w = image.shape
    x0 = math.floor(center.x - size / 2.0 + 0.5)
    y0 = math.floor(center.y - size / 2.0 + 0.5)
    out = np.zeros((size, size), dtype=image.dtype)
    x_lo, x_hi = max(0, x0), min(w, x0 + size)
    y_lo, y_hi = max(0, y0), min(h, y0 + size)
    if x_lo < x_hi and y_lo < y_hi:
        out[y_lo - y0:y_hi - y0, x_lo - x0:x_hi - x0] = image[y_lo:y_hi, x_lo:x_hi]
    return Patch(out, (x0, y0))


def polygon_area(vertices: list[Point2D]) -> float:
    """Signed shoelace area (positive for counter-clockwise in image coords)."""
    acc = 0.0
    n = len(vertices)
    for i in range(n):
        a, b = vertices[i], vertices[(i + 1) % n]
        acc += a.x * b.y - b.x * a.y
    return 0.5 * acc


def rasterize_polygon(vertices: list[Point2D], width: int, height: int) -> BinaryMask:
    """Even-odd pixel-center fill of a polygon onto a width x height grid.

    The result is stored cropped to the polygon's bounding box with the crop
    offset recorded; pixels outside the image are clipped away.
    """
    if len(vertices) < 3:
        raise DegeneratePolygon(f"{len(vertices)} vertices")
    if abs(polygon_area(vertices)) < 1e-12:
        raise DegeneratePolygon("zero area")
    vx = np.array([p.x for p in vertices], dtype=np.float64)
    vy = np.array([p.y for p in vertices], dtype=np.float64)
    # pixel x is a candidate iff its center x+0.5 falls within the x-range
    x_lo = max(0, math.ceil(vx.min() - 0.5))
    x_hi = min(width - 1, math.floor(vx.max() - 0.5))
    y_lo = max(0, math.ceil(vy.min() - 0.5))
    y_hi = min(height - 1, math.floor(vy.max() - 0.5))
    if x_lo > x_hi or y_lo > y_hi:
        return BinaryMask(np.zeros((0, 0), dtype=np.bool_), (0, 0))
    bits = kernels.polygon_fill(vx, vy, x_lo, y_lo, x_hi - x_lo + 1, y_hi - y_lo + 1)
    return BinaryMask(bits, (x_lo, y_lo))


def mask_boundary(mask: BinaryMask) -> BinaryMask:
    """Foreground pixels with at least one 4-neighbor outside the mask."""
    b = mask.bits
    interior = b.copy()
    interior[1:, :] &= b[:-1, :]
    interior[:-1, :] &= b[1:, :]
    interior[:, 1:] &= b[:, :-1]
    interior[:, :-1] &= b[:, 1:]
    # border pixels of the grid always count as boundary
    if b.shape[0] > 0 and b.shape[1] > 0:
        interior[0, :] = False
        interior[-1, :] = False
        interior[:, 0] = False
        interior[:, -1] = False
    return BinaryMask(b & ~interior, mask.offset)
