import json
import math

import numpy as np
import pytest

from spinefm.backends import (
    REGULAR,
    BackendSet,
    DetectionCandidate,
    LinearPointPredictor,
    LogitMask,
    OracleNoise,
    spine_end,
)
from spinefm.dataio import chain_to_doc
from spinefm.errors import ConflictingAnchors, EmptySegmentation, InsufficientSeeds, InvalidConfig
from spinefm.geometry import Axis, BinaryMask, Point2D, centroid, dice, iou
from spinefm.phantom import PhantomSpec, generate, make_oracles
from spinefm.pipeline import (
    PipelineConfig,
    SpineChain,
    VertebraInstance,
    assign_labels,
    binarize,
    binarize_and_smooth,
    inductive_step,
    initial_stage,
    run_image,
    select_seeds,
    walk,
)

from conftest import mask_from_pixels


def block_candidate(x, y, conf, side=6):
    return DetectionCandidate(BinaryMask(np.ones((side, side), bool), (x, y)), conf)


def make_instance(mask, origin="seed", cls=REGULAR):
    logits = LogitMask(np.where(mask.bits, 10.0, -10.0).astype(np.float32), mask.offset)
    return VertebraInstance(mask, logits, centroid(mask), cls, origin)


def gt_instance(v, origin="seed"):
    return make_instance(BinaryMask(v.mask.bits.copy(), v.mask.offset), origin, v.cls)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_validation():
    PipelineConfig().validate()
    with pytest.raises(InvalidConfig):
        PipelineConfig(confidence_threshold=0.0).validate()
    with pytest.raises(InvalidConfig):
        PipelineConfig(iou_threshold=1.0).validate()
    with pytest.raises(InvalidConfig):
        PipelineConfig(patch_scale=1.0).validate()
    with pytest.raises(InvalidConfig):
        PipelineConfig(max_steps_per_direction=0).validate()
    with pytest.raises(InvalidConfig):
        PipelineConfig(region="thoracic").validate()


# ---------------------------------------------------------------------------
# select_seeds
# ---------------------------------------------------------------------------

def test_select_seeds_spec_example():
    # spine order top to bottom with confidences [0.5, 0.9, 0.8, 0.7, 0.95]
    confs = [0.5, 0.9, 0.8, 0.7, 0.95]
    cands = [block_candidate(50, 20 + 30 * i, c) for i, c in enumerate(confs)]
    sel = select_seeds(cands, PipelineConfig())
    # 0.5 dropped; best consecutive triple is (0.8, 0.7, 0.95)
    assert sel.indices == (2, 3, 4)
    ys = [p.y for p in sel.points]
    assert ys == sorted(ys)


def test_select_seeds_exactly_three():
    cands = [block_candidate(50, 20 + 30 * i, c) for i, c in enumerate([0.7, 0.9, 0.61])]
    sel = select_seeds(cands, PipelineConfig())
    assert sel.indices == (0, 1, 2)


def test_select_seeds_insufficient():
    cands = [block_candidate(50, 20 + 30 * i, c) for i, c in enumerate([0.7, 0.9, 0.59])]
    with pytest.raises(InsufficientSeeds):
        select_seeds(cands, PipelineConfig())


def brute_force_best_triple(confs, threshold=0.6):
    """Independent enumeration: filter, keep spine order, scan every triple."""
    kept = [(i, c) for i, c in enumerate(confs) if c >= threshold]
    best = None
    for s in range(len(kept) - 2):
        mean = sum(c for _, c in kept[s:s + 3]) / 3
        if best is None or mean > best[0] + 1e-15:
            best = (mean, tuple(i for i, _ in kept[s:s + 3]))
    return best[1] if best else None


def test_select_seeds_matches_brute_force(rng):
    for _ in range(200):
        n = int(rng.integers(3, 10))
        confs = np.round(rng.uniform(0.3, 1.0, n), 3).tolist()
        cands = [block_candidate(40, 15 + 25 * i, c) for i, c in enumerate(confs)]
        expect = brute_force_best_triple(confs)
        if expect is None:
            with pytest.raises(InsufficientSeeds):
                select_seeds(cands, PipelineConfig())
        else:
            assert select_seeds(cands, PipelineConfig()).indices == expect


def test_select_seeds_flip_axis_reverses_order():
    confs = [0.9, 0.8, 0.7]
    cands = [block_candidate(50, 20 + 30 * i, c) for i, c in enumerate(confs)]
    sel = select_seeds(cands, PipelineConfig(flip_axis=True))
    ys = [p.y for p in sel.points]
    assert ys == sorted(ys, reverse=True)
    assert sel.axis.direction[1] < 0


# ---------------------------------------------------------------------------
# binarization and smoothing
# ---------------------------------------------------------------------------

def test_binarize_threshold_examples():
    logits = LogitMask(np.array([[3.0, 2.0]], np.float32), (0, 0))
    m = binarize(logits, 0.9)
    assert m.bits.tolist() == [[True, False]]
    # sigmoid arithmetic backs the example
    assert 1 / (1 + math.exp(-3.0)) >= 0.9 > 1 / (1 + math.exp(-2.0))


def test_binarize_equivalence_grid():
    cfg = PipelineConfig()
    ln9 = math.log(9.0)
    grid = np.concatenate([
        np.linspace(-10, 10, 4001),
        np.array([2.1972 - 1e-6, 2.1972, 2.1972 + 1e-6]),
    ]).astype(np.float32)
    logits = LogitMask(grid.reshape(1, -1), (0, 0))
    via_logit = binarize(logits, cfg.sigmoid_threshold).bits[0]
    via_sigmoid = (1.0 / (1.0 + np.exp(-grid.astype(np.float64)))) >= 0.9
    assert np.array_equal(via_logit, via_sigmoid)
    assert binarize(LogitMask(np.array([[ln9 + 1e-9]], np.float32), (0, 0)), 0.9).bits[0, 0]


def test_smooth_uniform_mask_unchanged():
    logits = LogitMask(np.full((40, 30), 10.0, np.float32), (5, 7))
    out = binarize_and_smooth(logits, PipelineConfig())
    assert out.bits.all()
    assert out.offset == (5, 7)


def test_smooth_removes_isolated_pixel():
    vals = np.full((25, 25), -10.0, np.float32)
    vals[12, 12] = 10.0
    out = binarize_and_smooth(LogitMask(vals, (0, 0)), PipelineConfig())
    assert not out.bits.any()


# ---------------------------------------------------------------------------
# inductive_step terminations
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def lumbar_setup():
    ph = generate(PhantomSpec(spine_end_bottom="S1", seed=21))
    backends = make_oracles(ph)
    cents = [centroid(v.mask) for v in ph.gt]
    from spinefm.geometry import principal_axis
    axis = principal_axis(cents)
    return ph, backends, cents, axis


class StuckSegmenter:
    """Always returns the previous instance's mask as logits."""

    def __init__(self, mask):
        self.mask = mask

    def segment(self, patch, prompt):
        vals = np.full((patch.size, patch.size), -10.0, np.float32)
        ox, oy = patch.offset
        mx, my = self.mask.offset
        for yy in range(self.mask.height):
            for xx in range(self.mask.width):
                gx, gy = mx + xx, my + yy
                if self.mask.bits[yy, xx] and 0 <= gx - ox < patch.size and 0 <= gy - oy < patch.size:
                    vals[gy - oy, gx - ox] = 10.0
        return LogitMask(vals, patch.offset)


class BlobSegmenter:
    """Returns a fixed-size blob centered on the prompt."""

    def __init__(self, radius=8):
        self.radius = radius

    def segment(self, patch, prompt):
        ys, xs = np.mgrid[0:patch.size, 0:patch.size]
        inside = (xs - prompt.x) ** 2 + (ys - prompt.y) ** 2 <= self.radius ** 2
        return LogitMask(np.where(inside, 10.0, -10.0).astype(np.float32), patch.offset)


class EmptySegmenter:
    def segment(self, patch, prompt):
        return LogitMask(np.full((patch.size, patch.size), -10.0, np.float32), patch.offset)


class ConstClassifier:
    def __init__(self, cls):
        self.cls = cls

    def classify(self, point, context):
        return self.cls


def test_step_overlap_on_identical_mask(lumbar_setup):
    ph, backends, cents, axis = lumbar_setup
    prev = gt_instance(ph.gt[4])
    stuck = BackendSet(backends.detector, StuckSegmenter(prev.mask),
                       backends.classifier, backends.predictor)
    out = inductive_step((cents[2], cents[3], cents[4]), prev, ph.image, axis, 1,
                         44.0, stuck, PipelineConfig(), "induced-down")
    assert out.kind == "overlap"
    assert out.instance is None


def test_step_background(lumbar_setup):
    # hallucinating segmenter + oracle classifier: mask lands in true background
    ph, backends, cents, axis = lumbar_setup
    prev = gt_instance(ph.gt[6])  # S1, the last one
    blob = BackendSet(backends.detector, BlobSegmenter(), backends.classifier,
                      LinearPointPredictor())
    out = inductive_step((cents[4], cents[5], cents[6]), prev, ph.image, axis, 1,
                         44.0, blob, PipelineConfig(), "induced-down")
    assert out.kind == "background"


def test_step_spine_end_retained(lumbar_setup):
    ph, backends, cents, axis = lumbar_setup
    prev = gt_instance(ph.gt[5])
    out = inductive_step((cents[3], cents[4], cents[5]), prev, ph.image, axis, 1,
                         44.0, backends, PipelineConfig(), "induced-down")
    assert out.kind == "spine_end"
    assert out.instance is not None
    assert out.instance.cls == spine_end("S1")
    assert dice(out.instance.mask, ph.gt[6].mask) == 1.0


def test_step_continue_regular(lumbar_setup):
    ph, backends, cents, axis = lumbar_setup
    prev = gt_instance(ph.gt[4])
    out = inductive_step((cents[2], cents[3], cents[4]), prev, ph.image, axis, 1,
                         44.0, backends, PipelineConfig(), "induced-down")
    assert out.kind == "continue"
    assert dice(out.instance.mask, ph.gt[5].mask) == 1.0
    assert out.instance.origin == "induced-down"


def test_step_bounds(lumbar_setup):
    ph, backends, cents, axis = lumbar_setup

    class OutsidePredictor:
        def predict_next(self, c1, c2, c3, dims):
            return Point2D(-50.0, -50.0)

    b = BackendSet(backends.detector, backends.segmenter, backends.classifier,
                   OutsidePredictor())
    prev = gt_instance(ph.gt[4])
    out = inductive_step((cents[2], cents[3], cents[4]), prev, ph.image, axis, 1,
                         44.0, b, PipelineConfig(), "induced-down")
    assert out.kind == "bounds"


def test_step_empty_segmentation_non_progressing(lumbar_setup):
    ph, backends, cents, axis = lumbar_setup
    b = BackendSet(backends.detector, EmptySegmenter(), backends.classifier,
                   backends.predictor)
    prev = gt_instance(ph.gt[4])
    out = inductive_step((cents[2], cents[3], cents[4]), prev, ph.image, axis, 1,
                         44.0, b, PipelineConfig(), "induced-down")
    assert out.kind == "non_progressing"


def test_step_regressing_centroid_non_progressing(lumbar_setup):
    # segmenter returns the mask of an earlier vertebra: disjoint from prev
    # (IoU 0) but behind it along the walk
    ph, backends, cents, axis = lumbar_setup
    prev = gt_instance(ph.gt[4])
    b = BackendSet(backends.detector, StuckSegmenter(ph.gt[2].mask),
                   backends.classifier, backends.predictor)
    out = inductive_step((cents[2], cents[3], cents[4]), prev, ph.image, axis, 1,
                         44.0, b, PipelineConfig(), "induced-down")
    assert out.kind == "non_progressing"


# ---------------------------------------------------------------------------
# walk
# ---------------------------------------------------------------------------

def test_walk_zero_steps_capped(lumbar_setup):
    ph, backends, cents, axis = lumbar_setup
    seeds = [gt_instance(v) for v in ph.gt[2:5]]
    added, term = walk("down", seeds, ph.image, axis, 44.0, backends,
                       PipelineConfig(max_steps_per_direction=0))
    assert added == [] and term == "step_cap"


def test_walk_stuck_segmenter_single_step(lumbar_setup):
    ph, backends, cents, axis = lumbar_setup
    seeds = [gt_instance(v) for v in ph.gt[2:5]]
    stuck = BackendSet(backends.detector, StuckSegmenter(seeds[-1].mask),
                       backends.classifier, backends.predictor)
    added, term = walk("down", seeds, ph.image, axis, 44.0, stuck, PipelineConfig())
    assert added == [] and term == "overlap"


def test_walk_both_directions_from_middle(lumbar_setup):
    ph, backends, cents, axis = lumbar_setup
    seeds = [gt_instance(v) for v in ph.gt[2:5]]  # L2, L3, L4
    down, down_term = walk("down", seeds, ph.image, axis, 44.0, backends, PipelineConfig())
    assert len(down) == 2 and down_term == "spine_end"
    assert [i.origin for i in down] == ["induced-down", "induced-down"]
    assert dice(down[0].mask, ph.gt[5].mask) == 1.0
    assert dice(down[1].mask, ph.gt[6].mask) == 1.0
    up, up_term = walk("up", seeds, ph.image, axis, 44.0, backends, PipelineConfig())
    assert len(up) == 2
    assert dice(up[0].mask, ph.gt[1].mask) == 1.0
    assert dice(up[1].mask, ph.gt[0].mask) == 1.0
    assert up_term in ("non_progressing", "bounds", "background")


def test_walk_step_cap_with_drifting_always_regular():
    ph = generate(PhantomSpec(spine_end_bottom="S1", seed=22))
    backends = make_oracles(ph)
    cents = [centroid(v.mask) for v in ph.gt]
    from spinefm.geometry import principal_axis
    axis = principal_axis(cents)
    seeds = [gt_instance(v) for v in ph.gt[2:5]]

    class FixedStepPredictor:
        """Small in-bounds drift so the cap is the binding stop."""

        def predict_next(self, c1, c2, c3, dims):
            return Point2D(c3.x, c3.y + 12.0)

    cfg = PipelineConfig(max_steps_per_direction=5)
    b = BackendSet(backends.detector, BlobSegmenter(radius=5),
                   ConstClassifier(REGULAR), FixedStepPredictor())
    added, term = walk("down", seeds, ph.image, axis, 44.0, b, cfg)
    assert term == "step_cap"
    assert len(added) == 5


# ---------------------------------------------------------------------------
# assign_labels
# ---------------------------------------------------------------------------

def _relabel_chain(instances, axis=None):
    chain = SpineChain(instances=instances, axis=axis or Axis(Point2D(0, 0), (0.0, 1.0)))
    return assign_labels(chain, PipelineConfig())


def _simple_instance(y, cls=REGULAR):
    return make_instance(mask_from_pixels([(10, y), (11, y)]), cls=cls)


def test_labels_lumbar_anchor_last():
    instances = [_simple_instance(10 + 12 * i) for i in range(6)]
    instances.append(_simple_instance(82, cls=spine_end("S1")))
    chain = _relabel_chain(instances)
    assert [i.label for i in chain.instances] == ["T12", "L1", "L2", "L3", "L4", "L5", "S1"]
    assert chain.anchored


def test_labels_cervical_anchor_first():
    instances = [_simple_instance(10, cls=spine_end("C2"))]
    instances += [_simple_instance(22 + 12 * i) for i in range(6)]
    chain = _relabel_chain(instances)
    assert [i.label for i in chain.instances] == ["C2", "C3", "C4", "C5", "C6", "C7", "T1"]
    assert chain.anchored


def test_labels_relative_fallback():
    instances = [_simple_instance(10 + 12 * i) for i in range(4)]
    chain = _relabel_chain(instances)
    assert [i.label for i in chain.instances] == ["V0", "V1", "V2", "V3"]
    assert not chain.anchored


def test_labels_out_of_range_flagged():
    # nine instances with S1 at the end: two fall off the lumbar sequence
    instances = [_simple_instance(10 + 12 * i) for i in range(8)]
    instances.append(_simple_instance(106, cls=spine_end("S1")))
    chain = _relabel_chain(instances)
    labels = [i.label for i in chain.instances]
    assert labels[2:] == ["T12", "L1", "L2", "L3", "L4", "L5", "S1"]
    assert labels[0] == "out-2" and labels[1] == "out-1"
    assert chain.instances[0].out_of_range and chain.instances[1].out_of_range
    assert not chain.instances[2].out_of_range


def test_labels_conflicting_anchors():
    instances = [_simple_instance(10, cls=spine_end("C2"))]
    instances += [_simple_instance(22 + 12 * i) for i in range(3)]
    instances.append(_simple_instance(70, cls=spine_end("S1")))
    with pytest.raises(ConflictingAnchors):
        _relabel_chain(instances)
    dupes = [_simple_instance(10, cls=spine_end("C2")),
             _simple_instance(30, cls=spine_end("C2")),
             _simple_instance(50)]
    with pytest.raises(ConflictingAnchors):
        _relabel_chain(dupes)


def test_labels_order_equivariant_under_axis_flip():
    instances = [_simple_instance(10 + 12 * i) for i in range(6)]
    instances.append(_simple_instance(82, cls=spine_end("S1")))
    fwd = _relabel_chain([make_instance(i.mask, cls=i.cls) for i in instances])
    rev_instances = [make_instance(i.mask, cls=i.cls) for i in reversed(instances)]
    rev = _relabel_chain(rev_instances, axis=Axis(Point2D(0, 0), (0.0, -1.0)))
    assert {i.label for i in fwd.instances} == {i.label for i in rev.instances}
    assert [i.label for i in rev.instances] == [i.label for i in fwd.instances][::-1]


# ---------------------------------------------------------------------------
# initial_stage and run_image
# ---------------------------------------------------------------------------

def test_initial_stage_recovers_gt_masks(lumbar_setup):
    ph, backends, cents, axis = lumbar_setup
    init = initial_stage(ph.image, backends.detector, backends.segmenter, PipelineConfig())
    assert len(init.instances) == 3
    for inst, v in zip(init.instances, ph.gt[:3]):
        assert dice(inst.mask, v.mask) == 1.0
    assert init.extent == pytest.approx(44.0, abs=1.0)


def test_initial_stage_with_jittered_detector():
    ph = generate(PhantomSpec(spine_end_bottom="S1", seed=23))
    backends = make_oracles(ph, OracleNoise(centroid_jitter=0.25, seed=7))
    init = initial_stage(ph.image, backends.detector, backends.segmenter, PipelineConfig())
    for inst, v in zip(init.instances, ph.gt[:3]):
        assert dice(inst.mask, v.mask) == 1.0


def test_initial_stage_empty_segmentation():
    ph = generate(PhantomSpec(spine_end_bottom="S1", seed=24))
    backends = make_oracles(ph)
    b = BackendSet(backends.detector, EmptySegmenter(), backends.classifier,
                   backends.predictor)
    with pytest.raises(EmptySegmentation):
        initial_stage(ph.image, b.detector, b.segmenter, PipelineConfig())


def test_run_image_full_chain(lumbar_setup):
    ph, backends, _, _ = lumbar_setup
    chain = run_image(ph.image, backends, PipelineConfig())
    assert len(chain.instances) == 7
    assert chain.anchored
    assert chain.failure is None
    assert [i.label for i in chain.instances] == [v.label for v in ph.gt]
    for inst, v in zip(chain.instances, ph.gt):
        assert dice(inst.mask, v.mask) == 1.0


def test_run_image_chain_invariants(lumbar_setup):
    ph, backends, _, _ = lumbar_setup
    cfg = PipelineConfig()
    chain = run_image(ph.image, backends, cfg)
    projs = [chain.axis.project(i.centroid) for i in chain.instances]
    assert all(b > a for a, b in zip(projs, projs[1:]))
    for a, b in zip(chain.instances, chain.instances[1:]):
        assert iou(a.mask, b.mask) <= cfg.iou_threshold


def test_run_image_detector_returns_nothing(lumbar_setup):
    ph, backends, _, _ = lumbar_setup

    class NullDetector:
        def detect(self, image):
            return []

    b = BackendSet(NullDetector(), backends.segmenter, backends.classifier,
                   backends.predictor)
    chain = run_image(ph.image, b, PipelineConfig())
    assert chain.instances == []
    assert chain.failure is not None and "insufficient seeds" in chain.failure


def test_run_image_deterministic(lumbar_setup):
    ph, backends, _, _ = lumbar_setup
    cfg = PipelineConfig()
    a = chain_to_doc(run_image(ph.image, backends, cfg), cfg, "img")
    b = chain_to_doc(run_image(ph.image, backends, cfg), cfg, "img")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_run_image_total_instance_bound():
    ph = generate(PhantomSpec(spine_end_bottom="S1", seed=25))
    backends = make_oracles(ph)
    cfg = PipelineConfig(max_steps_per_direction=2)
    chain = run_image(ph.image, backends, cfg)
    assert len(chain.instances) <= 3 + 2 * cfg.max_steps_per_direction
