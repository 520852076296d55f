"""Prediction-to-ground-truth matching and per-level metrics.

Metrics follow the three-column scheme: '% identified' (share of annotated
vertebrae matched by a prediction), 'located DSC' (mean Dice over the matched
ones), and 'overall DSC' (mean Dice over all annotated vertebrae, counting
unmatched ones as zero). Section averages are weighted by each level's
ground-truth count, i.e. pooled over instances, which keeps the identity
overall = located * pct/100 exact for the summary row as well.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .backends import GroundTruthVertebra
from .dataio import LEVELS, GroundTruth
from .errors import IoFailure
from .geometry import BinaryMask, dice, mask_boundary

if TYPE_CHECKING:
    from .pipeline import SpineChain

log = logging.getLogger("spinefm.evaluation")

DEFAULT_MIN_DICE = 0.5


@dataclass
class MatchResult:
    pairs: list[tuple[str, int, float]] = field(default_factory=list)
    unmatched_gt: list[str] = field(default_factory=list)
    unmatched_pred: list[int] = field(default_factory=list)


@dataclass
class LevelRow:
    level: str
    count: int
    pct_identified: float
    located_dsc: float
    overall_dsc: float
    located_defined: bool = True
    matched: int = 0
    dice_sum: float = 0.0


def _bboxes_touch(a: BinaryMask, b: BinaryMask) -> bool:
    ax0, ay0, ax1, ay1 = a.bbox()
    bx0, by0, bx1, by1 = b.bbox()
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


def match_masks(pred_masks: list[BinaryMask], gt_entries: list[GroundTruthVertebra],
                min_dice: float = DEFAULT_MIN_DICE) -> MatchResult:
    """Greedy one-to-one matching in descending Dice order.

    Pairs below min_dice are discarded; a ground-truth vertebra counts as
    identified iff it ends up matched.
    """
    scored = []
    for gi, gt in enumerate(gt_entries):
        for pi, pred in enumerate(pred_masks):
            if pred.is_empty() or not _bboxes_touch(pred, gt.mask):
                continue
            d = dice(pred, gt.mask)
            if d > 0.0 and d >= min_dice:
                scored.append((d, gi, pi))
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_gt: set[int] = set()
    used_pred: set[int] = set()
    result = MatchResult()
    for d, gi, pi in scored:
        if gi in used_gt or pi in used_pred:
            continue
        used_gt.add(gi)
        used_pred.add(pi)
        result.pairs.append((gt_entries[gi].label, pi, d))
    result.unmatched_gt = [gt.label for gi, gt in enumerate(gt_entries) if gi not in used_gt]
    result.unmatched_pred = [pi for pi in range(len(pred_masks)) if pi not in used_pred]
    return result


def match_predictions(chain: "SpineChain", gt: GroundTruth,
                      min_dice: float = DEFAULT_MIN_DICE) -> MatchResult:
    return match_masks([inst.mask for inst in chain.instances], gt.entries, min_dice)


def per_level_metrics(results: Iterable[tuple[MatchResult, GroundTruth]]) -> list[LevelRow]:
    """Aggregate matches over a dataset into one row per vertebra level."""
    count: dict[str, int] = {}
    matched: dict[str, int] = {}
    dice_sum: dict[str, float] = {}
    for match, gt in results:
        for entry in gt.entries:
            count[entry.label] = count.get(entry.label, 0) + 1
        for label, _pi, d in match.pairs:
            matched[label] = matched.get(label, 0) + 1
            dice_sum[label] = dice_sum.get(label, 0.0) + d
    rows = []
    order = {lvl: i for i, lvl in enumerate(LEVELS)}
    for label in sorted(count, key=lambda l: order.get(l, len(LEVELS))):
        c = count[label]
        m = matched.get(label, 0)
        ds = dice_sum.get(label, 0.0)
        rows.append(LevelRow(
            level=label,
            count=c,
            pct_identified=m / c * 100.0,
            located_dsc=(ds / m) if m > 0 else 0.0,
            overall_dsc=ds / c,
            located_defined=m > 0,
            matched=m,
            dice_sum=ds,
        ))
    return rows


def weighted_average(rows: list[LevelRow]) -> LevelRow:
    """Frequency-weighted summary row, pooled over all ground-truth instances."""
    if not rows:
        raise ValueError("no rows to average")
    c = sum(r.count for r in rows)
    m = sum(r.matched for r in rows)
    ds = sum(r.dice_sum for r in rows)
    return LevelRow(
        level="weighted_average",
        count=c,
        pct_identified=m / c * 100.0,
        located_dsc=(ds / m) if m > 0 else 0.0,
        overall_dsc=ds / c,
        located_defined=m > 0,
        matched=m,
        dice_sum=ds,
    )


METRICS_CSV_HEADER = "level,pct_identified,located_dsc,overall_dsc,count"


def write_metrics_csv(rows: list[LevelRow], path: str | Path,
                      include_summary: bool = True) -> None:
    """Per-level CSV plus the weighted-average row, with the fixed header."""
    lines = [METRICS_CSV_HEADER]
    out_rows = list(rows)
    if include_summary and rows:
        out_rows.append(weighted_average(rows))
    for r in out_rows:
        lines.append(f"{r.level},{r.pct_identified!r},{r.located_dsc!r},{r.overall_dsc!r},{r.count}")
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e


def overlay_image(pred_masks: list[BinaryMask], gt_entries: list[GroundTruthVertebra],
                  width: int, height: int) -> np.ndarray:
    """Gray ground-truth fill with bright prediction boundaries, for eyeballing."""
    canvas = np.zeros((height, width), dtype=np.uint8)
    for entry in gt_entries:
        canvas[entry.mask.to_full(width, height)] = 128
    for pred in pred_masks:
        if pred.is_empty():
            continue
        canvas[mask_boundary(pred).to_full(width, height)] = 255
    return canvas
