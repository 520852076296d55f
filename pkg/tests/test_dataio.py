import json

import numpy as np
import pytest

from spinefm import dataio
from spinefm.backends import spine_end
from spinefm.errors import (
    CorruptFile,
    ParseError,
    SchemaError,
    UnknownLabel,
    UnsupportedFormat,
)
from spinefm.geometry import Point2D
from spinefm.phantom import PhantomSpec, generate, make_oracles
from spinefm.pipeline import PipelineConfig, run_image

from conftest import pixel_set


def write_ann(tmp_path, body, name="img.json"):
    p = tmp_path / name
    p.write_text(json.dumps(body) if isinstance(body, dict) else body, encoding="utf-8")
    return p


def valid_doc():
    return {
        "image_path": "img.pgm",
        "width": 64,
        "height": 64,
        "region": "cervical",
        "vertebrae": [
            {"label": "C3", "polygon": [[10, 10], [30, 10], [30, 20], [10, 20],
                                        [9.5, 16.0], [9.0, 14.0], [9.5, 12.0]]},
            {"label": "C4", "polygon": [[10, 30], [30, 30], [30, 40], [10, 40]]},
        ],
    }


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

def test_load_annotations_seven_vertex_polygon(tmp_path):
    doc = dataio.load_annotations(write_ann(tmp_path, valid_doc()))
    assert doc.width == 64 and doc.region == "cervical"
    assert [v.label for v in doc.vertebrae] == ["C3", "C4"]
    assert len(doc.vertebrae[0].polygon) == 7
    gt = dataio.rasterize_gt(doc)
    assert gt.entries[0].cls.tag == "regular"


def test_load_annotations_unknown_label(tmp_path):
    body = valid_doc()
    body["vertebrae"][0]["label"] = "C9"
    with pytest.raises(UnknownLabel):
        dataio.load_annotations(write_ann(tmp_path, body))


def test_load_annotations_s1_quad_is_spine_end(tmp_path):
    body = valid_doc()
    body["region"] = "lumbar"
    body["vertebrae"] = [{"label": "S1", "polygon": [[10, 10], [30, 12], [29, 25], [11, 23]]}]
    doc = dataio.load_annotations(write_ann(tmp_path, body))
    gt = dataio.rasterize_gt(doc)
    assert gt.entries[0].cls == spine_end("S1")


def test_load_annotations_errors(tmp_path):
    with pytest.raises(ParseError):
        dataio.load_annotations(write_ann(tmp_path, "{not json"))
    body = valid_doc()
    del body["width"]
    with pytest.raises(SchemaError):
        dataio.load_annotations(write_ann(tmp_path, body))
    body = valid_doc()
    body["vertebrae"][1]["label"] = "C3"  # duplicate
    with pytest.raises(SchemaError):
        dataio.load_annotations(write_ann(tmp_path, body))
    body = valid_doc()
    body["vertebrae"][0]["polygon"] = [[0, 0], [1, 1]]
    with pytest.raises(SchemaError):
        dataio.load_annotations(write_ann(tmp_path, body))
    body = valid_doc()
    body["region"] = "thoracic"
    with pytest.raises(SchemaError):
        dataio.load_annotations(write_ann(tmp_path, body))


def test_load_annotations_clamps_out_of_bounds(tmp_path, caplog):
    body = valid_doc()
    body["vertebrae"][0]["polygon"][0] = [-5, 10]
    doc = dataio.load_annotations(write_ann(tmp_path, body))
    assert doc.vertebrae[0].polygon[0] == Point2D(0.0, 10.0)


def test_rasterize_gt_skips_degenerate(tmp_path, caplog):
    body = valid_doc()
    body["vertebrae"][0]["polygon"] = [[5, 5], [10, 10], [15, 15]]  # collinear
    doc = dataio.load_annotations(write_ann(tmp_path, body))
    gt = dataio.rasterize_gt(doc)
    assert gt.skipped == 1
    assert [e.label for e in gt.entries] == ["C4"]


def test_annotation_roundtrip(tmp_path):
    ph = generate(PhantomSpec(spine_end_top="C2", curvature_amplitude=9.0, seed=8))
    doc = dataio.AnnotationDoc(
        image_path="p.pgm", width=ph.spec.image_width, height=ph.spec.image_height,
        region="cervical",
        vertebrae=[dataio.AnnotatedVertebra(v.label, v.polygon) for v in ph.gt])
    path = tmp_path / "p.json"
    dataio.save_annotations(doc, path)
    back = dataio.load_annotations(path)
    gt = dataio.rasterize_gt(back)
    assert [e.label for e in gt.entries] == [v.label for v in ph.gt]
    for e, v in zip(gt.entries, ph.gt):
        assert pixel_set(e.mask) == pixel_set(v.mask)


def test_bbox_polygon_roundtrip_preserves_counts(tmp_path):
    # rasterize, rebuild quads from each mask bbox, save, reload, rasterize:
    # pixel counts survive the trip exactly
    ph = generate(PhantomSpec(spine_end_bottom="S1", curvature_amplitude=12.0, seed=9))
    w, h = ph.dims
    quads = []
    for v in ph.gt:
        x0, y0, x1, y1 = v.mask.bbox()
        quads.append(dataio.AnnotatedVertebra(
            v.label, [Point2D(x0, y0), Point2D(x1, y0), Point2D(x1, y1), Point2D(x0, y1)]))
    doc = dataio.AnnotationDoc("p.pgm", w, h, "lumbar", quads)
    path = tmp_path / "quads.json"
    dataio.save_annotations(doc, path)
    gt = dataio.rasterize_gt(dataio.load_annotations(path))
    for entry, v in zip(gt.entries, ph.gt):
        x0, y0, x1, y1 = v.mask.bbox()
        assert entry.mask.count() == (x1 - x0) * (y1 - y0)


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def test_pgm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (33, 47), dtype=np.uint8)
    p = tmp_path / "img.pgm"
    dataio.write_pgm(p, img)
    assert np.array_equal(dataio.load_image(p), img)


def test_pgm_header_with_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n3 2\n255\n" + bytes(6))
    img = dataio.load_image(p)
    assert img.shape == (2, 3)


def test_pgm_rejects_ascii(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
    with pytest.raises(UnsupportedFormat):
        dataio.load_image(p)


def test_pgm_rejects_other_formats(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(UnsupportedFormat):
        dataio.load_image(p)
    p.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(UnsupportedFormat):
        dataio.load_image(p)


def test_pgm_truncated_payload(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(CorruptFile):
        dataio.load_image(p)


# ---------------------------------------------------------------------------
# run outputs
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def chain_and_phantom():
    ph = generate(PhantomSpec(spine_end_bottom="S1", seed=31))
    cfg = PipelineConfig()
    chain = run_image(ph.image, make_oracles(ph), cfg)
    return ph, cfg, chain


def test_write_outputs_counts(chain_and_phantom, tmp_path):
    ph, cfg, chain = chain_and_phantom
    files = dataio.write_outputs(chain, cfg, "img0", ph.dims, tmp_path)
    assert len(files) == 1 + 7
    doc = json.loads((tmp_path / "img0.chain.json").read_text())
    assert doc["failure"] is None
    assert doc["anchored"] is True
    assert len(doc["instances"]) == 7
    assert doc["instances"][0]["mask_file"] == "img0_T12.pgm"
    assert doc["config"]["iou_threshold"] == cfg.iou_threshold
    mask = dataio.load_image(tmp_path / "img0_S1.pgm")
    assert set(np.unique(mask)) == {0, 255}


def test_write_outputs_failure_record(chain_and_phantom, tmp_path):
    from spinefm.pipeline import SpineChain

    ph, cfg, _ = chain_and_phantom
    failed = SpineChain(failure="insufficient seeds: 0 candidates")
    files = dataio.write_outputs(failed, cfg, "bad", ph.dims, tmp_path)
    assert len(files) == 1
    doc = json.loads((tmp_path / "bad.chain.json").read_text())
    assert doc["failure"].startswith("insufficient seeds")
    assert doc["instances"] == []


def test_write_outputs_idempotent(chain_and_phantom, tmp_path):
    ph, cfg, chain = chain_and_phantom
    dataio.write_outputs(chain, cfg, "img0", ph.dims, tmp_path)
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    dataio.write_outputs(chain, cfg, "img0", ph.dims, tmp_path)
    second = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    assert first == second
