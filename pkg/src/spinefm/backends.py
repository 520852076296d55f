"""Inference backend interfaces and their deterministic oracle implementations.

The pipeline consumes four roles: a detector (rough candidate masks with
confidences), a segmenter (prompted patch segmentation to logits), a patch
classifier (background / regular / spine-end), and a point predictor (next
centroid from the previous three). Oracles answer all four from known ground
truth, which makes pipeline behavior exactly checkable; real models plug in
through the same interfaces (see extproto for out-of-process backends).

Oracle semantics, shared verbatim by the out-of-process reference server:

* detect returns the ground-truth masks in document order at confidence 1.0
  (optionally corrupted by seeded dropout / jitter / false positives);
* segment picks the first vertebra whose mask contains the prompt point, or
  failing that the nearest centroid within the capture radius (half the
  median inter-vertebra spacing), and returns +10 logits inside that
  vertebra and -10 elsewhere, on the patch grid;
* classify answers the class of the vertebra containing the query point, or
  background.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .errors import BackendFailure
from .geometry import Axis, BinaryMask, Patch, Point2D, centroid, principal_axis, sort_by_projection
from .mlp import MLPWeights, mlp_forward

ORACLE_LOGIT = 10.0

TAG_BACKGROUND = "background"
TAG_REGULAR = "regular"
TAG_SPINE_END = "spine_end"

SPINE_END_LABELS = ("C2", "S1")


@dataclass(frozen=True)
class PatchClass:
    tag: str
    spine_end_kind: Optional[str] = None

    def __post_init__(self):
        if self.tag not in (TAG_BACKGROUND, TAG_REGULAR, TAG_SPINE_END):
            raise ValueError(f"bad tag {self.tag!r}")
        if (self.spine_end_kind is not None) != (self.tag == TAG_SPINE_END):
            raise ValueError("spine_end_kind present iff tag is spine_end")
        if self.spine_end_kind is not None and self.spine_end_kind not in SPINE_END_LABELS:
            raise ValueError(f"bad spine end kind {self.spine_end_kind!r}")


BACKGROUND = PatchClass(TAG_BACKGROUND)
REGULAR = PatchClass(TAG_REGULAR)


def spine_end(kind: str) -> PatchClass:
    return PatchClass(TAG_SPINE_END, kind)


def class_for_label(label: str) -> PatchClass:
    """Spine-end class for C2/S1, regular for every other level."""
    if label in SPINE_END_LABELS:
        return spine_end(label)
    return REGULAR


@dataclass
class DetectionCandidate:
    mask: BinaryMask
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0,1]")
        if self.mask.is_empty():
            raise ValueError("empty candidate mask")


@dataclass
class LogitMask:
    """Pre-sigmoid segmentation output aligned to a patch grid."""

    values: np.ndarray
    offset: tuple[int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.offset = (int(self.offset[0]), int(self.offset[1]))


@dataclass
class GroundTruthVertebra:
    label: str
    mask: BinaryMask
    cls: PatchClass


@dataclass
class ImageContext:
    """What a classifier may look at: the image plus the current patch size."""

    image: np.ndarray
    patch_size: int


class Detector(Protocol):
    def detect(self, image: np.ndarray) -> list[DetectionCandidate]: ...


class Segmenter(Protocol):
    def segment(self, patch: Patch, prompt: Point2D) -> LogitMask: ...


class Classifier(Protocol):
    def classify(self, point: Point2D, context: ImageContext) -> PatchClass: ...


class PointPredictor(Protocol):
    def predict_next(self, c1: Point2D, c2: Point2D, c3: Point2D,
                     image_dims: tuple[int, int]) -> Point2D: ...


@dataclass
class BackendSet:
    detector: Detector
    segmenter: Segmenter
    classifier: Classifier
    predictor: PointPredictor


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------


def linear_extrapolate(c1: Point2D, c2: Point2D, c3: Point2D) -> Point2D:
    """Constant-step baseline: c3 + (c3 - c2)."""
    return Point2D(c3.x + (c3.x - c2.x), c3.y + (c3.y - c2.y))


class LinearPointPredictor:
    def predict_next(self, c1, c2, c3, image_dims):
        return linear_extrapolate(c1, c2, c3)


class MLPPointPredictor:
    """Normalizes centroids by image dims, runs the trained net, denormalizes."""

    def __init__(self, weights: MLPWeights):
        self.weights = weights

    def predict_next(self, c1, c2, c3, image_dims):
        w, h = image_dims
        x = np.array([c1.x / w, c1.y / h, c2.x / w, c2.y / h, c3.x / w, c3.y / h])
        out = mlp_forward(self.weights, x)
        return Point2D(out[0] * w, out[1] * h)


# ---------------------------------------------------------------------------
# ground-truth oracles
# ---------------------------------------------------------------------------


@dataclass
class OracleNoise:
    """Detector corruption knobs; zero everywhere means a perfect detector."""

    dropout_prob: float = 0.0
    false_positives: int = 0
    centroid_jitter: float = 0.0  # fraction of the vertebra's bbox long side
    seed: int = 0


def _bbox_long_side(mask: BinaryMask) -> float:
    x0, y0, x1, y1 = mask.bbox()
    return float(max(x1 - x0, y1 - y0))


class OracleContext:
    """Shared ground-truth state: vertebrae in document order plus geometry."""

    def __init__(self, vertebrae: list[GroundTruthVertebra], image_dims: tuple[int, int]):
        if not vertebrae:
            raise ValueError("oracle needs at least one ground-truth vertebra")
        self.vertebrae = vertebrae
        self.image_dims = (int(image_dims[0]), int(image_dims[1]))
        self.centroids = [centroid(v.mask) for v in vertebrae]
        if len(vertebrae) >= 2:
            self.axis: Optional[Axis] = principal_axis(self.centroids)
            order = sort_by_projection(self.centroids, self.axis)
            spaced = [self.centroids[i] for i in order]
            gaps = []
            for a, b in zip(spaced, spaced[1:]):
                dx, dy = b.x - a.x, b.y - a.y
                gaps.append(math.sqrt(dx * dx + dy * dy))
            # half a spacing: tolerant to prompt error, but a prompt a full
            # spacing past the chain end stays unclaimed
            self.capture_radius = 0.5 * float(np.median(np.array(gaps)))
            self._sorted_proj = [self.axis.project(spaced_p) for spaced_p in spaced]
            self._sorted_centroids = spaced
        else:
            self.axis = None
            self.capture_radius = _bbox_long_side(vertebrae[0].mask)
            self._sorted_proj = []
            self._sorted_centroids = []

    def vertebra_at(self, p: Point2D) -> Optional[int]:
        """Index of the first vertebra (document order) whose mask holds p."""
        for i, v in enumerate(self.vertebrae):
            if v.mask.contains(p):
                return i
        return None

    def nearest_within_capture(self, p: Point2D) -> Optional[int]:
        best, best_d = None, math.inf
        for i, c in enumerate(self.centroids):
            dx, dy = c.x - p.x, c.y - p.y
            d = math.sqrt(dx * dx + dy * dy)
            if d < best_d:
                best, best_d = i, d
        if best is not None and best_d <= self.capture_radius:
            return best
        return None


class OracleDetector:
    """Returns ground-truth masks as candidates, with optional seeded corruption.

    For dropout probabilities strictly between 0 and 1, a seeded window of
    three consecutive vertebrae is exempt from dropout and keeps confidence
    1.0 while other survivors get seeded confidences in [0.8, 0.95]; seed
    selection therefore always finds an adjacent triple. Dropout 1 removes
    every true candidate. Jitter translates candidate masks by up to
    ``centroid_jitter * bbox-long-side`` pixels (clamped to the image).
    Injected false positives are small random rectangles at confidence
    <= 0.5.
    """

    def __init__(self, ctx: OracleContext, noise: OracleNoise | None = None):
        self.ctx = ctx
        noise = noise or OracleNoise()
        rng = np.random.default_rng(noise.seed)
        n = len(ctx.vertebrae)
        dropping = 0.0 < noise.dropout_prob < 1.0
        protected: set[int] = set()
        if dropping and n >= 3:
            start = int(rng.integers(0, n - 2))
            protected = {start, start + 1, start + 2}
        w, h = ctx.image_dims
        candidates: list[DetectionCandidate] = []
        for i, v in enumerate(ctx.vertebrae):
            if noise.dropout_prob >= 1.0:
                continue
            conf = 1.0
            if dropping and i not in protected:
                if rng.random() < noise.dropout_prob:
                    continue
                conf = float(rng.uniform(0.8, 0.95))
            mask = v.mask
            if noise.centroid_jitter > 0.0:
                extent = _bbox_long_side(mask)
                dx = int(round(noise.centroid_jitter * extent * rng.uniform(-1.0, 1.0)))
                dy = int(round(noise.centroid_jitter * extent * rng.uniform(-1.0, 1.0)))
                x0, y0, x1, y1 = mask.bbox()
                dx = min(max(dx, -x0), w - x1)
                dy = min(max(dy, -y0), h - y1)
                mask = mask.translated(dx, dy)
            candidates.append(DetectionCandidate(mask, conf))
        for _ in range(noise.false_positives):
            fw = max(2, int(rng.integers(4, 12)))
            fh = max(2, int(rng.integers(4, 12)))
            fx = int(rng.integers(0, max(1, w - fw)))
            fy = int(rng.integers(0, max(1, h - fh)))
            bits = np.ones((fh, fw), dtype=np.bool_)
            conf = float(rng.uniform(0.1, 0.5))
            candidates.append(DetectionCandidate(BinaryMask(bits, (fx, fy)), conf))
        self._candidates = candidates

    def detect(self, image: np.ndarray) -> list[DetectionCandidate]:
        h, w = image.shape
        if (w, h) != self.ctx.image_dims:
            raise BackendFailure(f"image dims {(w, h)} != oracle dims {self.ctx.image_dims}")
        return list(self._candidates)


class OracleSegmenter:
    def __init__(self, ctx: OracleContext):
        self.ctx = ctx

    def segment(self, patch: Patch, prompt: Point2D) -> LogitMask:
        size_y, size_x = patch.pixels.shape
        if not (0 <= prompt.x < size_x and 0 <= prompt.y < size_y):
            raise BackendFailure(f"prompt {prompt} outside patch {size_x}x{size_y}")
        ox, oy = patch.offset
        p_img = Point2D(ox + prompt.x, oy + prompt.y)
        idx = self.ctx.vertebra_at(p_img)
        if idx is None:
            idx = self.ctx.nearest_within_capture(p_img)
        values = np.full((size_y, size_x), -ORACLE_LOGIT, dtype=np.float32)
        if idx is not None:
            m = self.ctx.vertebrae[idx].mask
            mx, my = m.offset
            x_lo = max(ox, mx)
            x_hi = min(ox + size_x, mx + m.width)
            y_lo = max(oy, my)
            y_hi = min(oy + size_y, my + m.height)
            if x_lo < x_hi and y_lo < y_hi:
                sub = m.bits[y_lo - my:y_hi - my, x_lo - mx:x_hi - mx]
                region = values[y_lo - oy:y_hi - oy, x_lo - ox:x_hi - ox]
                region[sub] = ORACLE_LOGIT
        return LogitMask(values, (ox, oy))


class OracleClassifier:
    def __init__(self, ctx: OracleContext):
        self.ctx = ctx

    def classify(self, point: Point2D, context: ImageContext) -> PatchClass:
        idx = self.ctx.vertebra_at(point)
        if idx is None:
            return BACKGROUND
        return self.ctx.vertebrae[idx].cls


class OraclePointPredictor:
    """Returns the true next centroid along the walk direction.

    Direction is read from the projections of the last two centroids onto the
    ground-truth chain axis; past either end of the chain this falls back to
    linear extrapolation, which steps into background and lets the normal
    termination rules fire.
    """

    def __init__(self, ctx: OracleContext):
        self.ctx = ctx

    def predict_next(self, c1, c2, c3, image_dims):
        ctx = self.ctx
        if ctx.axis is None or not ctx._sorted_proj:
            return linear_extrapolate(c1, c2, c3)
        t3 = ctx.axis.project(c3)
        t2 = ctx.axis.project(c2)
        if t3 == t2:
            t2 = ctx.axis.project(c1)
        if t3 == t2:
            return linear_extrapolate(c1, c2, c3)
        ts = ctx._sorted_proj
        if t3 > t2:  # walking toward ascending projection
            i = bisect.bisect_right(ts, t3)
            if i < len(ts):
                return ctx._sorted_centroids[i]
        else:
            i = bisect.bisect_left(ts, t3)
            if i > 0:
                return ctx._sorted_centroids[i - 1]
        return linear_extrapolate(c1, c2, c3)


def oracles_from_ground_truth(
    vertebrae: list[GroundTruthVertebra],
    image_dims: tuple[int, int],
    noise: OracleNoise | None = None,
) -> BackendSet:
    """Build the full oracle backend set bound to one image's ground truth."""
    ctx = OracleContext(vertebrae, image_dims)
    return BackendSet(
        detector=OracleDetector(ctx, noise),
        segmenter=OracleSegmenter(ctx),
        classifier=OracleClassifier(ctx),
        predictor=OraclePointPredictor(ctx),
    )
