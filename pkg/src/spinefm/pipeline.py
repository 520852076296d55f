"""The segmentation state machine.

An image is processed in two stages. The initial stage picks the best
consecutive triple of high-confidence detector candidates along the spine
axis, re-segments each with a centered prompt, and re-measures the centroids.
The inductive stage then walks outward in both directions along the axis:
predict the next centroid from the last three, segment a patch there, and
either keep the new vertebra or terminate on one of the stop rules (overlap
with the previous mask, background or spine-end classification, leaving the
image, failing to progress, or the step cap). Retained logit masks are then
smoothed and re-thresholded, and anatomical labels are inferred from any
detected spine-end vertebra.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .backends import (
    REGULAR,
    TAG_BACKGROUND,
    TAG_SPINE_END,
    BackendSet,
    DetectionCandidate,
    Detector,
    ImageContext,
    LogitMask,
    PatchClass,
    Segmenter,
)
from .errors import (
    ConflictingAnchors,
    EmptySegmentation,
    InsufficientSeeds,
    InvalidConfig,
)
from .geometry import (
    Axis,
    BinaryMask,
    Point2D,
    centroid,
    extract_patch,
    iou,
    principal_axis,
    sort_by_projection,
)

log = logging.getLogger("spinefm.pipeline")

CERVICAL_SEQUENCE = ("C2", "C3", "C4", "C5", "C6", "C7", "T1")
LUMBAR_SEQUENCE = ("T12", "L1", "L2", "L3", "L4", "L5", "S1")

ORIGIN_SEED = "seed"
ORIGIN_UP = "induced-up"
ORIGIN_DOWN = "induced-down"

TERM_OVERLAP = "overlap"
TERM_BACKGROUND = "background"
TERM_SPINE_END = "spine_end"
TERM_STEP_CAP = "step_cap"
TERM_BOUNDS = "bounds"
TERM_NON_PROGRESSING = "non_progressing"

STEP_CONTINUE = "continue"


@dataclass
class PipelineConfig:
    confidence_threshold: float = 0.6
    iou_threshold: float = 0.1
    sigmoid_threshold: float = 0.9
    patch_scale: float = 2.0
    smoothing_sigma: float = 2.0
    resmooth_threshold: float = 0.5
    max_steps_per_direction: int = 12
    region: str = "cervical"
    flip_axis: bool = False  # set for scans whose superior side is at larger y

    def validate(self) -> "PipelineConfig":
        for name in ("confidence_threshold", "iou_threshold", "sigmoid_threshold",
                     "resmooth_threshold"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise InvalidConfig(f"{name} {v} outside (0,1)")
        if not self.patch_scale > 1.0:
            raise InvalidConfig(f"patch_scale {self.patch_scale} must be > 1")
        if self.smoothing_sigma <= 0.0:
            raise InvalidConfig(f"smoothing_sigma {self.smoothing_sigma} must be > 0")
        if self.max_steps_per_direction < 1:
            raise InvalidConfig(f"max_steps_per_direction {self.max_steps_per_direction} < 1")
        if self.region not in ("cervical", "lumbar"):
            raise InvalidConfig(f"region {self.region!r}")
        return self


@dataclass
class VertebraInstance:
    mask: BinaryMask
    logits: LogitMask
    centroid: Point2D
    cls: PatchClass
    origin: str
    label: Optional[str] = None
    out_of_range: bool = False


@dataclass
class SpineChain:
    instances: list[VertebraInstance] = field(default_factory=list)
    up_termination: Optional[str] = None
    down_termination: Optional[str] = None
    anchored: bool = False
    axis: Optional[Axis] = None
    extent: Optional[float] = None
    failure: Optional[str] = None


@dataclass
class StepOutcome:
    kind: str
    instance: Optional[VertebraInstance] = None


@dataclass
class SeedSelection:
    points: tuple[Point2D, Point2D, Point2D]
    axis: Axis
    indices: tuple[int, int, int]


@dataclass
class InitialStage:
    instances: list[VertebraInstance]
    axis: Axis
    extent: float


def binarize(logits: LogitMask, sigmoid_threshold: float) -> BinaryMask:
    """Threshold logits at the sigmoid_threshold probability level."""
    thr = math.log(sigmoid_threshold / (1.0 - sigmoid_threshold))
    return BinaryMask(logits.values >= thr, logits.offset)


def binarize_and_smooth(logits: LogitMask, cfg: PipelineConfig) -> BinaryMask:
    """Threshold, then Gaussian-smooth the binary field and re-threshold.

    The blur is a normalized convolution (blurred field divided by the
    blurred all-ones field), so constant regions pass through unchanged and
    isolated speckle is removed.
    """
    bits = binarize(logits, cfg.sigmoid_threshold).bits
    fieldf = bits.astype(np.float64)
    kern = kernels.gaussian_kernel(cfg.smoothing_sigma)
    num = kernels.gaussian_blur(fieldf, kern)
    den = kernels.gaussian_blur(np.ones_like(fieldf), kern)
    return BinaryMask((num / den) >= cfg.resmooth_threshold, logits.offset)


def _bbox_long_side(mask: BinaryMask) -> float:
    x0, y0, x1, y1 = mask.bbox()
    return float(max(x1 - x0, y1 - y0))


def _patch_size(extent: float, cfg: PipelineConfig) -> int:
    return max(1, int(math.floor(cfg.patch_scale * extent + 0.5)))


def select_seeds(candidates: list[DetectionCandidate], cfg: PipelineConfig) -> SeedSelection:
    """Pick the consecutive projection-ordered triple with highest mean confidence."""
    survivors = [(i, c) for i, c in enumerate(candidates)
                 if c.confidence >= cfg.confidence_threshold]
    if len(survivors) < 3:
        raise InsufficientSeeds(
            f"{len(survivors)} candidates at confidence >= {cfg.confidence_threshold}")
    cents = [centroid(c.mask) for _, c in survivors]
    axis = principal_axis(cents)
    if cfg.flip_axis:
        axis = axis.flipped()
    order = sort_by_projection(cents, axis)
    best_start, best_mean = 0, -1.0
    for s in range(len(order) - 2):
        mean_conf = sum(survivors[order[s + k]][1].confidence for k in range(3)) / 3.0
        if mean_conf > best_mean:
            best_start, best_mean = s, mean_conf
    sel = [order[best_start + k] for k in range(3)]
    return SeedSelection(
        points=tuple(cents[i] for i in sel),
        axis=axis,
        indices=tuple(survivors[i][0] for i in sel),
    )


def initial_stage(image: np.ndarray, detector: Detector, segmenter: Segmenter,
                  cfg: PipelineConfig) -> InitialStage:
    """Detect, select the seed triple, and re-segment each seed with a centered prompt."""
    candidates = detector.detect(image)
    sel = select_seeds(candidates, cfg)
    extent0 = sum(_bbox_long_side(candidates[i].mask) for i in sel.indices) / 3.0
    size = _patch_size(extent0, cfg)
    instances = []
    for p in sel.points:
        patch = extract_patch(image, p, size)
        prompt = Point2D(p.x - patch.offset[0], p.y - patch.offset[1])
        logits = segmenter.segment(patch, prompt)
        mask = binarize(logits, cfg.sigmoid_threshold)
        if mask.is_empty():
            raise EmptySegmentation(f"seed at ({p.x:.1f}, {p.y:.1f}) segmented to nothing")
        mask = mask.cropped()
        instances.append(VertebraInstance(mask, logits, centroid(mask), REGULAR, ORIGIN_SEED))
    order = sort_by_projection([i.centroid for i in instances], sel.axis)
    instances = [instances[i] for i in order]
    projs = [sel.axis.project(i.centroid) for i in instances]
    for a, b in zip(projs, projs[1:]):
        if not (b > a):
            raise InsufficientSeeds("seed segmentations collapsed onto one vertebra")
    for a, b in zip(instances, instances[1:]):
        if iou(a.mask, b.mask) > cfg.iou_threshold:
            raise InsufficientSeeds("adjacent seed masks overlap")
    extent1 = sum(_bbox_long_side(i.mask) for i in instances) / 3.0
    return InitialStage(instances, sel.axis, extent1)


def inductive_step(
    last3: tuple[Point2D, Point2D, Point2D],
    prev_instance: VertebraInstance,
    image: np.ndarray,
    axis: Axis,
    sign: int,
    extent: float,
    backends: BackendSet,
    cfg: PipelineConfig,
    origin: str,
) -> StepOutcome:
    """One induction step: predict, segment, and apply the stop rules in order."""
    h, w = image.shape
    c1, c2, c3 = last3
    predicted = backends.predictor.predict_next(c1, c2, c3, (w, h))
    if not (0.0 <= predicted.x < w and 0.0 <= predicted.y < h):
        return StepOutcome(TERM_BOUNDS)
    size = _patch_size(extent, cfg)
    patch = extract_patch(image, predicted, size)
    prompt = Point2D(predicted.x - patch.offset[0], predicted.y - patch.offset[1])
    logits = backends.segmenter.segment(patch, prompt)
    mask = binarize(logits, cfg.sigmoid_threshold)
    if mask.is_empty():
        return StepOutcome(TERM_NON_PROGRESSING)
    mask = mask.cropped()
    c_new = centroid(mask)
    if iou(mask, prev_instance.mask) > cfg.iou_threshold:
        return StepOutcome(TERM_OVERLAP)
    if sign * (axis.project(c_new) - axis.project(prev_instance.centroid)) <= 0.0:
        return StepOutcome(TERM_NON_PROGRESSING)
    cls = backends.classifier.classify(c_new, ImageContext(image, size))
    if cls.tag == TAG_BACKGROUND:
        return StepOutcome(TERM_BACKGROUND)
    inst = VertebraInstance(mask, logits, c_new, cls, origin)
    if cls.tag == TAG_SPINE_END:
        return StepOutcome(TERM_SPINE_END, inst)
    return StepOutcome(STEP_CONTINUE, inst)


def walk(
    direction: str,
    seeds: list[VertebraInstance],
    image: np.ndarray,
    axis: Axis,
    extent: float,
    backends: BackendSet,
    cfg: PipelineConfig,
) -> tuple[list[VertebraInstance], str]:
    """Walk from the seed triple toward one end of the spine.

    ``direction`` is "down" for ascending axis projection and "up" for
    descending. Returns the instances appended in walk order plus the
    termination reason.
    """
    if direction not in ("up", "down"):
        raise ValueError(f"direction {direction!r}")
    sign = 1 if direction == "down" else -1
    origin = ORIGIN_DOWN if direction == "down" else ORIGIN_UP
    ordered = seeds if direction == "down" else list(reversed(seeds))
    history = [inst.centroid for inst in ordered]
    prev = ordered[-1]
    added: list[VertebraInstance] = []
    steps = 0
    while True:
        if steps >= cfg.max_steps_per_direction:
            return added, TERM_STEP_CAP
        outcome = inductive_step(
            (history[-3], history[-2], history[-1]), prev, image, axis, sign,
            extent, backends, cfg, origin)
        steps += 1
        if outcome.kind == STEP_CONTINUE:
            added.append(outcome.instance)
            history.append(outcome.instance.centroid)
            prev = outcome.instance
        elif outcome.kind == TERM_SPINE_END:
            added.append(outcome.instance)
            return added, TERM_SPINE_END
        else:
            return added, outcome.kind


def assign_labels(chain: SpineChain, cfg: PipelineConfig) -> SpineChain:
    """Infer anatomical level names from detected spine-end vertebrae.

    A C2 anchors the cervical sequence from the superior end; an S1 anchors
    the lumbar sequence from the inferior end. Without any spine end the
    labels fall back to relative names V0..Vn (superior first).
    """
    if not chain.instances:
        return chain
    n = len(chain.instances)
    dy = chain.axis.direction[1] if chain.axis is not None else 1.0
    sup_order = list(range(n)) if dy >= 0 else list(range(n - 1, -1, -1))

    ends = []
    for k, idx in enumerate(sup_order):
        cls = chain.instances[idx].cls
        if cls.tag == TAG_SPINE_END:
            ends.append((k, cls.spine_end_kind))
    chain.anchored = bool(ends)

    if not ends:
        for k, idx in enumerate(sup_order):
            chain.instances[idx].label = f"V{k}"
            chain.instances[idx].out_of_range = False
        return chain

    kinds = {kind for _, kind in ends}
    if len(kinds) > 1:
        raise ConflictingAnchors(f"both {sorted(kinds)} detected in one chain")
    if len(ends) > 1:
        raise ConflictingAnchors(
            f"{len(ends)} {ends[0][1]} detections imply inconsistent positions")
    anchor_k, kind = ends[0]
    seq = CERVICAL_SEQUENCE if kind == "C2" else LUMBAR_SEQUENCE
    anchor_seq = 0 if kind == "C2" else len(seq) - 1
    for k, idx in enumerate(sup_order):
        s = anchor_seq + (k - anchor_k)
        inst = chain.instances[idx]
        if 0 <= s < len(seq):
            inst.label = seq[s]
            inst.out_of_range = False
        elif s < 0:
            inst.label = f"out-{-s}"
            inst.out_of_range = True
        else:
            inst.label = f"out+{s - len(seq) + 1}"
            inst.out_of_range = True
    return chain


def run_image(image: np.ndarray, backends: BackendSet, cfg: PipelineConfig) -> SpineChain:
    """Full pipeline for one image; returns a failure-recording chain on seeding errors."""
    cfg.validate()
    try:
        init = initial_stage(image, backends.detector, backends.segmenter, cfg)
    except InsufficientSeeds as e:
        log.info("seeding failed: %s", e)
        return SpineChain(failure=f"insufficient seeds: {e}")

    size = _patch_size(init.extent, cfg)
    ctx = ImageContext(image, size)
    for inst in init.instances:
        inst.cls = backends.classifier.classify(inst.centroid, ctx)

    up_added, up_term = walk("up", init.instances, image, init.axis, init.extent, backends, cfg)
    down_added, down_term = walk("down", init.instances, image, init.axis, init.extent,
                                 backends, cfg)
    instances = list(reversed(up_added)) + init.instances + down_added

    kept = []
    for inst in instances:
        smoothed = binarize_and_smooth(inst.logits, cfg)
        if smoothed.is_empty():
            log.warning("instance at (%.1f, %.1f) vanished after smoothing",
                        inst.centroid.x, inst.centroid.y)
            continue
        inst.mask = smoothed.cropped()
        inst.centroid = centroid(inst.mask)
        kept.append(inst)

    chain = SpineChain(
        instances=kept,
        up_termination=up_term,
        down_termination=down_term,
        axis=init.axis,
        extent=init.extent,
    )
    return assign_labels(chain, cfg)
