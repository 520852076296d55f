"""Synthetic spine-radiograph generator with exact ground truth.

Vertebrae are rounded quadrilaterals placed at integer centers along a
sinusoidal centerline. The canonical vertebra shape is iterated to a fixed
point of the default post-processing operator (Gaussian smooth at sigma 2,
re-threshold at 0.5), so a pipeline that segments a phantom vertebra exactly
still matches the stored ground truth exactly after post-processing. Each
ground-truth polygon traces the pixel boundary of its mask, which makes the
polygon -> mask round trip through the rasterizer exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .backends import (
    BackendSet,
    GroundTruthVertebra,
    OracleNoise,
    PatchClass,
    class_for_label,
    oracles_from_ground_truth,
)
from .errors import SpecOverflow
from .geometry import BinaryMask, Point2D
from .pipeline import CERVICAL_SEQUENCE, LUMBAR_SEQUENCE

_SHAPE_SIGMA = 2.0       # default post-processing smoothing
_SHAPE_RETHRESH = 0.5


@dataclass
class PhantomSpec:
    image_width: int = 320
    image_height: int = 448
    n_vertebrae: int = 7
    vertebra_width: int = 44
    vertebra_height: int = 28
    spacing: float = 52.0
    curvature_amplitude: float = 0.0
    curvature_wavelength: float = 260.0
    intensity_noise_sigma: float = 10.0
    spine_end_top: Optional[str] = None     # "C2" or None
    spine_end_bottom: Optional[str] = None  # "S1" or None
    seed: int = 0

    def validate(self) -> "PhantomSpec":
        if self.n_vertebrae < 3:
            raise SpecOverflow(f"n_vertebrae {self.n_vertebrae} < 3")
        if self.spacing <= self.vertebra_height:
            raise SpecOverflow(
                f"spacing {self.spacing} must exceed vertebra_height {self.vertebra_height}")
        if self.spine_end_top not in (None, "C2"):
            raise SpecOverflow(f"spine_end_top {self.spine_end_top!r}")
        if self.spine_end_bottom not in (None, "S1"):
            raise SpecOverflow(f"spine_end_bottom {self.spine_end_bottom!r}")
        if self.spine_end_top and self.spine_end_bottom:
            raise SpecOverflow("a phantom cannot contain both C2 and S1")
        if self.vertebra_width < 8 or self.vertebra_height < 8:
            raise SpecOverflow("vertebra smaller than 8 px")
        if self.curvature_wavelength <= 0:
            raise SpecOverflow("curvature_wavelength must be positive")
        self.labels()  # raises if the sequence cannot cover n_vertebrae
        return self

    def labels(self) -> list[str]:
        n = self.n_vertebrae
        if self.spine_end_top == "C2":
            seq = CERVICAL_SEQUENCE[:n]
        elif self.spine_end_bottom == "S1":
            seq = LUMBAR_SEQUENCE[len(LUMBAR_SEQUENCE) - n:] if n <= len(LUMBAR_SEQUENCE) else ()
        else:
            seq = CERVICAL_SEQUENCE[1:1 + n]
        if len(seq) != n:
            raise SpecOverflow(f"{n} vertebrae do not fit the label vocabulary")
        return list(seq)

    @property
    def region(self) -> str:
        return "lumbar" if self.spine_end_bottom == "S1" else "cervical"


@dataclass
class PhantomVertebra:
    label: str
    polygon: list[Point2D]
    mask: BinaryMask
    cls: PatchClass


@dataclass
class PhantomImage:
    image: np.ndarray
    gt: list[PhantomVertebra]
    spec: PhantomSpec

    @property
    def dims(self) -> tuple[int, int]:
        return (self.spec.image_width, self.spec.image_height)


# ---------------------------------------------------------------------------
# canonical vertebra shape
# ---------------------------------------------------------------------------

_shape_cache: dict[tuple[int, int], tuple[np.ndarray, list[tuple[int, int]]]] = {}


def _rounded_rect_raster(w: int, h: int, r: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    dx = np.maximum(np.abs(xs - cx) - (w / 2.0 - r - 0.5), 0.0)
    dy = np.maximum(np.abs(ys - cy) - (h / 2.0 - r - 0.5), 0.0)
    return (dx * dx + dy * dy) <= r * r


def _smooth_rethreshold(bits: np.ndarray) -> np.ndarray:
    kern = kernels.gaussian_kernel(_SHAPE_SIGMA)
    pad = kern.size // 2 + 1
    f = np.zeros((bits.shape[0] + 2 * pad, bits.shape[1] + 2 * pad), dtype=np.float64)
    f[pad:-pad, pad:-pad] = bits
    num = kernels.gaussian_blur(f, kern)
    den = kernels.gaussian_blur(np.ones_like(f), kern)
    out = (num / den) >= _SHAPE_RETHRESH
    if out[:pad].any() or out[-pad:].any() or out[:, :pad].any() or out[:, -pad:].any():
        raise SpecOverflow("vertebra shape grew under smoothing")
    return out[pad:-pad, pad:-pad]


def trace_outline(bits: np.ndarray) -> list[tuple[int, int]]:
    """Rectilinear outline of a solid 4-connected pixel region.

    Vertices are lattice corners; the polygon contains exactly the centers
    (x+0.5, y+0.5) of the region's pixels.
    """
    h, w = bits.shape

    def fg(x: int, y: int) -> bool:
        return 0 <= x < w and 0 <= y < h and bool(bits[y, x])

    nxt: dict[tuple[int, int], tuple[int, int]] = {}
    for y in range(h):
        for x in range(w):
            if not bits[y, x]:
                continue
            if not fg(x, y - 1):
                nxt[(x, y)] = (x + 1, y)
            if not fg(x + 1, y):
                nxt[(x + 1, y)] = (x + 1, y + 1)
            if not fg(x, y + 1):
                nxt[(x + 1, y + 1)] = (x, y + 1)
            if not fg(x - 1, y):
                nxt[(x, y + 1)] = (x, y)
    if not nxt:
        raise ValueError("empty region")
    start = min(nxt)
    path = [start]
    cur = nxt[start]
    while cur != start:
        path.append(cur)
        if cur not in nxt:
            raise ValueError("region boundary is not a single loop")
        cur = nxt[cur]
        if len(path) > 4 * len(nxt):
            raise ValueError("region boundary is not a single loop")
    out = []
    n = len(path)
    for i in range(n):
        prev, here, after = path[i - 1], path[i], path[(i + 1) % n]
        d1 = (here[0] - prev[0], here[1] - prev[1])
        d2 = (after[0] - here[0], after[1] - here[1])
        if d1 != d2:
            out.append(here)
    return out


def canonical_vertebra(w: int, h: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Fixed-point vertebra raster for a w x h rounded quad, plus its outline."""
    key = (int(w), int(h))
    if key in _shape_cache:
        return _shape_cache[key]
    r = max(2.0, min(w, h) / 4.0)
    bits = _rounded_rect_raster(w, h, r)
    for _ in range(64):
        nxt_bits = _smooth_rethreshold(bits)
        if np.array_equal(nxt_bits, bits):
            break
        bits = nxt_bits
    else:
        raise SpecOverflow(f"{w}x{h} vertebra shape does not stabilize under smoothing")
    if not bits.any():
        raise SpecOverflow(f"{w}x{h} vertebra erodes away under default smoothing")
    ys, xs = np.nonzero(bits)
    bits = bits[ys.min():ys.max() + 1, xs.min():xs.max() + 1].copy()
    outline = trace_outline(bits)
    _shape_cache[key] = (bits, outline)
    return bits, outline


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

FOREGROUND_LEVEL = 150.0
BACKGROUND_LEVEL = 90.0  # 60 gray levels below the vertebrae


def generate(spec: PhantomSpec) -> PhantomImage:
    """Deterministic phantom image plus exact ground truth for the spec."""
    spec.validate()
    w_img, h_img = spec.image_width, spec.image_height
    shape_bits, outline = canonical_vertebra(spec.vertebra_width, spec.vertebra_height)
    sh, sw = shape_bits.shape
    labels = spec.labels()

    vertebrae: list[PhantomVertebra] = []
    for k in range(spec.n_vertebrae):
        yc = h_img / 2.0 + (k - (spec.n_vertebrae - 1) / 2.0) * spec.spacing
        xc = w_img / 2.0 + spec.curvature_amplitude * math.sin(
            2.0 * math.pi * yc / spec.curvature_wavelength)
        x0 = int(round(xc)) - sw // 2
        y0 = int(round(yc)) - sh // 2
        if x0 < 1 or y0 < 1 or x0 + sw > w_img - 1 or y0 + sh > h_img - 1:
            raise SpecOverflow(
                f"vertebra {k} at ({xc:.0f}, {yc:.0f}) does not fit the image")
        mask = BinaryMask(shape_bits.copy(), (x0, y0))
        polygon = [Point2D(float(x0 + vx), float(y0 + vy)) for vx, vy in outline]
        label = labels[k]
        vertebrae.append(PhantomVertebra(label, polygon, mask, class_for_label(label)))

    for a, b in zip(vertebrae, vertebrae[1:]):
        ay0, ay1 = a.mask.offset[1], a.mask.offset[1] + a.mask.height
        by0 = b.mask.offset[1]
        if by0 < ay1:
            raise SpecOverflow("adjacent ground-truth masks touch")

    canvas = np.full((h_img, w_img), BACKGROUND_LEVEL, dtype=np.float64)
    for v in vertebrae:
        x0, y0 = v.mask.offset
        region = canvas[y0:y0 + v.mask.height, x0:x0 + v.mask.width]
        region[v.mask.bits] = FOREGROUND_LEVEL
    rng = np.random.default_rng(spec.seed)
    if spec.intensity_noise_sigma > 0:
        canvas = canvas + rng.normal(0.0, spec.intensity_noise_sigma, canvas.shape)
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return PhantomImage(image, vertebrae, spec)


def make_oracles(phantom: PhantomImage, noise: OracleNoise | None = None) -> BackendSet:
    """Oracle backends bound to this phantom's ground truth."""
    entries = [GroundTruthVertebra(v.label, v.mask, v.cls) for v in phantom.gt]
    return oracles_from_ground_truth(entries, phantom.dims, noise)
