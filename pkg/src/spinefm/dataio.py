"""Annotation and image ingestion, ground-truth rasterization, result persistence.

External formats:

* annotation document: UTF-8 JSON with fields image_path, width, height,
  region, vertebrae: [{label, polygon: [[x, y], ...]}]; pixel coordinates,
  origin top-left, x rightward, y downward;
* images: binary 8-bit PGM (P5, maxval 255) only;
* chain document: one JSON per image with the config echo, per-instance
  records, termination reasons and failure records; instance masks are
  written as full-size 0/255 PGMs named <image>_<label>.pgm;
* metrics CSV: header level,pct_identified,located_dsc,overall_dsc,count.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .backends import GroundTruthVertebra, class_for_label
from .errors import (
    CorruptFile,
    DegeneratePolygon,
    IoFailure,
    ParseError,
    SchemaError,
    UnknownLabel,
    UnsupportedFormat,
)
from .geometry import BinaryMask, Point2D, rasterize_polygon

if TYPE_CHECKING:
    from .pipeline import PipelineConfig, SpineChain

log = logging.getLogger("spinefm.dataio")

LEVELS = ("C2", "C3", "C4", "C5", "C6", "C7", "T1",
          "T12", "L1", "L2", "L3", "L4", "L5", "S1")
REGIONS = ("cervical", "lumbar")


@dataclass
class AnnotatedVertebra:
    label: str
    polygon: list[Point2D]


@dataclass
class AnnotationDoc:
    image_path: str
    width: int
    height: int
    region: str
    vertebrae: list[AnnotatedVertebra]


@dataclass
class GroundTruth:
    entries: list[GroundTruthVertebra] = field(default_factory=list)
    skipped: int = 0


def _require(doc: dict, key: str, kind: type, where: str):
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    v = doc[key]
    if kind is int and isinstance(v, bool):
        raise SchemaError(f"{where}: field {key!r} must be {kind.__name__}")
    if not isinstance(v, kind):
        raise SchemaError(f"{where}: field {key!r} must be {kind.__name__}")
    return v


def load_annotations(path: str | Path) -> AnnotationDoc:
    """Parse and validate one annotation document."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"{path}: {e}") from e
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: document is not an object")
    where = str(path)
    image_path = _require(raw, "image_path", str, where)
    width = _require(raw, "width", int, where)
    height = _require(raw, "height", int, where)
    region = _require(raw, "region", str, where)
    if width < 1 or height < 1:
        raise SchemaError(f"{where}: bad dimensions {width}x{height}")
    if region not in REGIONS:
        raise SchemaError(f"{where}: region {region!r} not in {REGIONS}")
    items = _require(raw, "vertebrae", list, where)
    seen: set[str] = set()
    vertebrae = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise SchemaError(f"{where}: vertebrae[{i}] is not an object")
        label = _require(item, "label", str, f"{where}: vertebrae[{i}]")
        if label not in LEVELS:
            raise UnknownLabel(f"{where}: label {label!r} not in the level vocabulary")
        if label in seen:
            raise SchemaError(f"{where}: duplicate label {label!r}")
        seen.add(label)
        poly_raw = _require(item, "polygon", list, f"{where}: vertebrae[{i}]")
        if len(poly_raw) < 3:
            raise SchemaError(f"{where}: vertebrae[{i}] polygon has {len(poly_raw)} vertices")
        polygon = []
        clamped = False
        for v in poly_raw:
            if (not isinstance(v, (list, tuple)) or len(v) != 2
                    or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in v)):
                raise SchemaError(f"{where}: vertebrae[{i}] polygon vertex {v!r}")
            x, y = float(v[0]), float(v[1])
            cx = min(max(x, 0.0), float(width))
            cy = min(max(y, 0.0), float(height))
            if cx != x or cy != y:
                clamped = True
            polygon.append(Point2D(cx, cy))
        if clamped:
            log.warning("%s: clamped out-of-bounds vertices for %s", path, label)
        vertebrae.append(AnnotatedVertebra(label, polygon))
    return AnnotationDoc(image_path, width, height, region, vertebrae)


def rasterize_gt(doc: AnnotationDoc) -> GroundTruth:
    """Rasterize all annotated polygons; degenerate entries are skipped with a warning."""
    gt = GroundTruth()
    for v in doc.vertebrae:
        try:
            mask = rasterize_polygon(v.polygon, doc.width, doc.height)
        except DegeneratePolygon as e:
            log.warning("%s: skipping degenerate polygon (%s)", v.label, e)
            gt.skipped += 1
            continue
        if mask.is_empty():
            log.warning("%s: polygon rasterized to nothing, skipping", v.label)
            gt.skipped += 1
            continue
        gt.entries.append(GroundTruthVertebra(v.label, mask, class_for_label(v.label)))
    return gt


def save_annotations(doc: AnnotationDoc, path: str | Path) -> None:
    raw = {
        "image_path": doc.image_path,
        "width": doc.width,
        "height": doc.height,
        "region": doc.region,
        "vertebrae": [
            {"label": v.label, "polygon": [[p.x, p.y] for p in v.polygon]}
            for v in doc.vertebrae
        ],
    }
    _write_text(Path(path), json.dumps(raw, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# PGM images
# ---------------------------------------------------------------------------


def load_image(path: str | Path) -> np.ndarray:
    """Read a binary 8-bit PGM (P5) into a row-major uint8 array."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P2":
        raise UnsupportedFormat(f"{path}: ASCII PGM (P2) not supported, use binary P5")
    if data[:2] != b"P5":
        raise UnsupportedFormat(f"{path}: not a PGM file")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise CorruptFile(f"{path}: truncated header")
        c = data[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif c.isdigit():
            end = pos
            while end < len(data) and data[end:end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise CorruptFile(f"{path}: unexpected byte {c!r} in header")
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: maxval {maxval}, only 8-bit supported")
    pos += 1  # single whitespace after maxval
    payload = data[pos:pos + width * height]
    if len(payload) != width * height:
        raise CorruptFile(f"{path}: payload {len(payload)} bytes, expected {width * height}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError("write_pgm wants a 2-D uint8 array")
    h, w = image.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(image.tobytes())
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e


def mask_to_pgm_array(mask: BinaryMask, width: int, height: int) -> np.ndarray:
    return np.where(mask.to_full(width, height), 255, 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# run outputs
# ---------------------------------------------------------------------------


def chain_to_doc(chain: "SpineChain", cfg: "PipelineConfig", image_id: str) -> dict:
    doc = {
        "image": image_id,
        "config": {
            "confidence_threshold": cfg.confidence_threshold,
            "iou_threshold": cfg.iou_threshold,
            "sigmoid_threshold": cfg.sigmoid_threshold,
            "patch_scale": cfg.patch_scale,
            "smoothing_sigma": cfg.smoothing_sigma,
            "resmooth_threshold": cfg.resmooth_threshold,
            "max_steps_per_direction": cfg.max_steps_per_direction,
            "region": cfg.region,
            "flip_axis": cfg.flip_axis,
        },
        "failure": chain.failure,
        "anchored": chain.anchored,
        "extent": chain.extent,
        "up_termination": chain.up_termination,
        "down_termination": chain.down_termination,
        "axis": None,
        "instances": [],
    }
    if chain.axis is not None:
        doc["axis"] = {
            "origin": [chain.axis.origin.x, chain.axis.origin.y],
            "direction": [chain.axis.direction[0], chain.axis.direction[1]],
        }
    for inst in chain.instances:
        doc["instances"].append({
            "label": inst.label,
            "origin": inst.origin,
            "centroid": [inst.centroid.x, inst.centroid.y],
            "class": {"tag": inst.cls.tag, "spine_end_kind": inst.cls.spine_end_kind},
            "out_of_range": inst.out_of_range,
            "mask_file": f"{image_id}_{inst.label}.pgm",
        })
    return doc


def write_outputs(chain: "SpineChain", cfg: "PipelineConfig", image_id: str,
                  image_dims: tuple[int, int], out_dir: str | Path) -> list[Path]:
    """Write the chain document and one mask PGM per instance; idempotent."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"{out_dir}: {e}") from e
    written = []
    doc = chain_to_doc(chain, cfg, image_id)
    doc_path = out_dir / f"{image_id}.chain.json"
    _write_text(doc_path, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    written.append(doc_path)
    w, h = image_dims
    for inst in chain.instances:
        mask_path = out_dir / f"{image_id}_{inst.label}.pgm"
        write_pgm(mask_path, mask_to_pgm_array(inst.mask, w, h))
        written.append(mask_path)
    return written


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
