"""Command-line entry point.

Subcommands: ``phantom`` (generate synthetic images + annotations),
``train-pp`` (fit the point predictor on annotation centroids), ``run``
(process a directory of images with oracle or external backends), and
``eval`` (score predictions against ground truth into the metrics CSV).

Exit codes: 0 success (including recorded per-image failures), 1 systemic
backend failure, 2 usage or validation errors. ``SPINEFM_LOG`` in
{error, warn, info, debug} sets stderr log verbosity.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluation, mlp
from .backends import (
    BackendSet,
    LinearPointPredictor,
    MLPPointPredictor,
    oracles_from_ground_truth,
)
from .errors import ChildExited, ProtoTimeout, SpineFMError
from .extproto import ExternalBackend, SubprocessAdapter
from .geometry import BinaryMask, centroid, principal_axis, sort_by_projection
from .phantom import PhantomSpec, generate
from .pipeline import PipelineConfig, SpineChain, run_image

log = logging.getLogger("spinefm.cli")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("SPINEFM_LOG", "warn").strip().lower()
    logging.basicConfig(stream=sys.stderr, level=_LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------------
# flat key-value config files
# ---------------------------------------------------------------------------


def parse_kv_file(path: Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, kind: type):
    if kind is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"bad bool {value!r}")
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    return value


def apply_fields(obj, pairs: dict[str, str]):
    """Set dataclass fields from string values, with type coercion."""
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in pairs.items():
        if key not in fields:
            raise ValueError(f"unknown field {key!r} (have: {', '.join(sorted(fields))})")
        if value.lower() in ("none", "null"):
            setattr(obj, key, None)
            continue
        current = getattr(obj, key)
        kind = type(current) if current is not None else str
        setattr(obj, key, _coerce(value, kind))
    return obj


def _load_pipeline_config(config_path: str | None, overrides: list[str]) -> PipelineConfig:
    cfg = PipelineConfig()
    pairs: dict[str, str] = {}
    if config_path:
        pairs.update(parse_kv_file(Path(config_path)))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--opt {item!r}: expected KEY=VALUE")
        key, _, value = item.partition("=")
        pairs[key.strip()] = value.strip()
    apply_fields(cfg, pairs)
    return cfg.validate()


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    base = PhantomSpec(spine_end_top="C2")
    try:
        if args.spec:
            apply_fields(base, parse_kv_file(Path(args.spec)))
        base.validate()
    except (SpineFMError, ValueError, OSError) as e:
        return _fail(str(e))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        spec = dataclasses.replace(base, seed=args.seed + i)
        name = f"phantom_{i:04d}"
        try:
            ph = generate(spec)
        except SpineFMError as e:
            return _fail(f"{name}: {e}")
        dataio.write_pgm(out_dir / f"{name}.pgm", ph.image)
        doc = dataio.AnnotationDoc(
            image_path=f"{name}.pgm",
            width=spec.image_width,
            height=spec.image_height,
            region=spec.region,
            vertebrae=[dataio.AnnotatedVertebra(v.label, v.polygon) for v in ph.gt],
        )
        dataio.save_annotations(doc, out_dir / f"{name}.json")
    print(f"wrote {args.count} phantom pairs to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train-pp
# ---------------------------------------------------------------------------


def build_training_samples(docs: list[dataio.AnnotationDoc]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Walk-ordered centroid triples (both directions) -> next centroid, normalized."""
    samples = []
    for doc in docs:
        gt = dataio.rasterize_gt(doc)
        if len(gt.entries) < 4:
            continue
        cents = [centroid(e.mask) for e in gt.entries]
        axis = principal_axis(cents)
        order = sort_by_projection(cents, axis)
        chain = [cents[i] for i in order]
        w, h = float(doc.width), float(doc.height)
        for seq in (chain, list(reversed(chain))):
            for i in range(len(seq) - 3):
                c1, c2, c3, c4 = seq[i:i + 4]
                x = np.array([c1.x / w, c1.y / h, c2.x / w, c2.y / h, c3.x / w, c3.y / h])
                y = np.array([c4.x / w, c4.y / h])
                samples.append((x, y))
    return samples


def cmd_train_pp(args) -> int:
    ann_dir = Path(args.annotations)
    paths = sorted(p for p in ann_dir.glob("*.json") if not p.name.endswith(".chain.json"))
    if not paths:
        return _fail(f"no annotation documents in {ann_dir}")
    try:
        docs = [dataio.load_annotations(p) for p in paths]
    except SpineFMError as e:
        return _fail(str(e))
    samples = build_training_samples(docs)
    if not samples:
        return _fail("no trainable samples (need documents with >= 4 vertebrae)")
    try:
        weights = mlp.mlp_train(samples, epochs=args.epochs, learning_rate=args.lr,
                                seed=args.seed)
    except SpineFMError as e:
        return _fail(str(e))
    mlp.save_weights(weights, args.out)
    X = np.array([s[0] for s in samples])
    Y = np.array([s[1] for s in samples])
    final = mlp.mse_loss(weights, X, Y)
    print(f"trained on {len(samples)} samples, final MSE {final:.3e}, wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

_ADAPTERS: dict[str, SubprocessAdapter] = {}


def _external_backend(cmd_template: str, ann_path: Path | None) -> ExternalBackend:
    if "{annotations}" in cmd_template:
        if ann_path is None:
            raise SpineFMError(f"backend command needs {{annotations}} but none found")
        cmd = cmd_template.replace("{annotations}", str(ann_path))
        return ExternalBackend(SubprocessAdapter(cmd))
    if cmd_template not in _ADAPTERS:
        _ADAPTERS[cmd_template] = SubprocessAdapter(cmd_template)
    return ExternalBackend(_ADAPTERS[cmd_template])


def _make_predictor(pp: str):
    if pp == "linear":
        return LinearPointPredictor()
    return MLPPointPredictor(mlp.load_weights(pp))


def _process_one(image_path_s: str, ann_path_s: str | None, backend_desc: str,
                 pp: str, cfg_fields: dict, out_dir_s: str) -> dict:
    """Run one image end to end; returns a small result record."""
    image_path = Path(image_path_s)
    stem = image_path.stem
    cfg = PipelineConfig(**cfg_fields)
    image = dataio.load_image(image_path)
    h, w = image.shape
    ann_path = Path(ann_path_s) if ann_path_s else None

    predictor = _make_predictor(pp)
    close_after = None
    if backend_desc == "oracle":
        if ann_path is None:
            raise SpineFMError(f"{stem}: oracle backend needs a {stem}.json annotation file")
        gt = dataio.rasterize_gt(dataio.load_annotations(ann_path))
        backends = oracles_from_ground_truth(gt.entries, (w, h))
        backends.predictor = predictor
    else:
        cmd_template = backend_desc[len("external:"):]
        ext = _external_backend(cmd_template, ann_path)
        if "{annotations}" in cmd_template:
            close_after = ext.adapter
        backends = BackendSet(detector=ext, segmenter=ext, classifier=ext,
                              predictor=predictor)
    try:
        try:
            chain = run_image(image, backends, cfg)
        except (ChildExited, ProtoTimeout):
            raise
        except SpineFMError as e:
            chain = SpineChain(failure=str(e))
    finally:
        if close_after is not None:
            close_after.close()
    files = dataio.write_outputs(chain, cfg, stem, (w, h), out_dir_s)
    return {"image": stem, "failure": chain.failure, "instances": len(chain.instances),
            "files": len(files)}


def cmd_run(args) -> int:
    if not (args.backend == "oracle" or args.backend.startswith("external:")):
        return _fail(f"--backend must be 'oracle' or 'external:<command>', got {args.backend!r}")
    if args.backend == "external:":
        return _fail("empty external backend command")
    try:
        cfg = _load_pipeline_config(args.config, args.opt)
    except (SpineFMError, ValueError, OSError) as e:
        return _fail(str(e))
    if args.pp != "linear" and not Path(args.pp).is_file():
        return _fail(f"--pp must be 'linear' or a weights file, {args.pp!r} not found")

    images_dir = Path(args.images)
    image_paths = sorted(images_dir.glob("*.pgm"))
    if not image_paths:
        return _fail(f"no .pgm images in {images_dir}")
    needs_ann = args.backend == "oracle" or "{annotations}" in args.backend
    if needs_ann:
        missing = [p.name for p in image_paths if not p.with_suffix(".json").is_file()]
        if missing:
            return _fail(f"backend needs annotation sidecars; missing for {missing}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = {
        "command": "run",
        "config": dataclasses.asdict(cfg),
        "inputs": [p.name for p in image_paths],
        "backend": args.backend,
        "pp": args.pp,
        "seed": args.seed,
        "out": str(args.out),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    jobs = []
    for p in image_paths:
        ann = p.with_suffix(".json")
        jobs.append((str(p), str(ann) if ann.is_file() else None, args.backend,
                     args.pp, dataclasses.asdict(cfg), str(out_dir)))

    failures = 0
    try:
        if args.jobs <= 1:
            results = [_process_one(*job) for job in jobs]
        else:
            with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_process_one_star, jobs))
    except (ChildExited, ProtoTimeout) as e:
        print(f"error: backend failure: {e}", file=sys.stderr)
        return 1
    finally:
        for adapter in _ADAPTERS.values():
            adapter.close()
        _ADAPTERS.clear()

    for r in results:
        if r["failure"]:
            failures += 1
            log.info("%s failed: %s", r["image"], r["failure"])
    print(f"processed {len(results)} images ({failures} recorded failures) -> {out_dir}")
    return 0


def _process_one_star(job):
    return _process_one(*job)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    chain_paths = {p.name[:-len(".chain.json")]: p for p in sorted(pred_dir.glob("*.chain.json"))}
    gt_paths = {p.stem: p for p in sorted(gt_dir.glob("*.json"))
                if not p.name.endswith(".chain.json")}
    if set(chain_paths) != set(gt_paths):
        only_pred = sorted(set(chain_paths) - set(gt_paths))
        only_gt = sorted(set(gt_paths) - set(chain_paths))
        return _fail(f"image ids differ between dirs (pred-only {only_pred}, gt-only {only_gt})")
    if not chain_paths:
        return _fail("no predictions to evaluate")

    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    overlay_dir = out_csv.parent / "overlays"
    overlay_dir.mkdir(parents=True, exist_ok=True)

    results = []
    try:
        for stem in sorted(chain_paths):
            doc = dataio.load_annotations(gt_paths[stem])
            gt = dataio.rasterize_gt(doc)
            chain_doc = json.loads(chain_paths[stem].read_text(encoding="utf-8"))
            pred_masks = []
            for inst in chain_doc.get("instances", []):
                arr = dataio.load_image(pred_dir / inst["mask_file"])
                pred_masks.append(BinaryMask(arr != 0))
            results.append((evaluation.match_masks(pred_masks, gt.entries, args.min_dice), gt))
            overlay = evaluation.overlay_image(pred_masks, gt.entries, doc.width, doc.height)
            dataio.write_pgm(overlay_dir / f"{stem}.pgm", overlay)
    except (SpineFMError, OSError, json.JSONDecodeError, KeyError) as e:
        return _fail(f"reading predictions/ground truth: {e}")

    rows = evaluation.per_level_metrics(results)
    evaluation.write_metrics_csv(rows, out_csv)
    if rows:
        summary = evaluation.weighted_average(rows)
        print(f"{len(results)} images: identified {summary.pct_identified:.1f}%, "
              f"located DSC {summary.located_dsc:.4f}, overall DSC {summary.overall_dsc:.4f}")
    print(f"wrote {out_csv}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinefm",
                                     description="Inductive vertebra segmentation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic image + annotation pairs")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--spec", help="flat key=value file of PhantomSpec fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train-pp", help="train the point predictor from annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_pp)

    p = sub.add_parser("run", help="run the pipeline over a directory of images")
    p.add_argument("--images", required=True)
    p.add_argument("--backend", default="oracle",
                   help="'oracle' or 'external:<command>' ({annotations} is substituted)")
    p.add_argument("--pp", default="linear", help="'linear' or a weights file")
    p.add_argument("--config", help="flat key=value file of PipelineConfig fields")
    p.add_argument("--opt", action="append", default=[], metavar="KEY=VALUE",
                   help="config override (repeatable)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--min-dice", type=float, default=evaluation.DEFAULT_MIN_DICE)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SpineFMError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
