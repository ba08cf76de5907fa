"""Command-line surface: localize, learn, generate, eval, world synth.

Exit codes: 0 ok, 2 input error, 3 missing dependency/fixture, 4 numeric
failure. Failures print a machine-readable JSON object to stderr. Every
command is idempotent: re-running with identical config and seed rewrites
byte-identical artifacts (none of them embed timestamps).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import svg
from .backends.synthetic import SyntheticEncoder, make_world, save_world
from .config import ConfigError, RunConfig, build_backend, load_config
from .core import (
    IceError,
    apply_mask,
    canonical_json,
    load_image,
    load_mask_png,
    save_image,
    sha256_bytes,
)
from .evaluation import (
    EvaluationError,
    acc_topk,
    evaluate_masks,
    hungarian_align_labels,
    icbench_scores,
    pixel_label_metrics,
    sim_composition,
    sim_identity,
)
from .learning import (
    StoreError,
    TrainingDivergedError,
    export_concepts,
    import_concepts,
    refine,
    start_run,
    train_phase_one,
    train_phase_two,
)
from .localization import localize, read_manifest, write_manifest
from .losses import DegenerateDistributionError, DegenerateRegionError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

UCE_SEEDS = tuple(range(8))
UCE_TEMPLATE = "a photo of a {}"


def _fail(code: int, error: str, message: str) -> int:
    sys.stderr.write(canonical_json({"error": error, "message": message}) + "\n")
    return code


def _workdir(args, cfg: "RunConfig | None") -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg is not None and cfg.paths.get("workdir"):
        base = Path(cfg.paths["workdir"])
        return base if base.is_absolute() else cfg.base_dir / base
    env = os.environ.get("ICE_WORKDIR")
    if env:
        return Path(env)
    return Path("ice_workdir")


def _write_report(doc: dict, out_dir: Path, name: str, config_hash: str = "") -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = dict(doc)
    doc["config_hash"] = config_hash
    doc["checksum"] = sha256_bytes(
        canonical_json({k: v for k, v in doc.items() if k != "checksum"}).encode("utf-8")
    )
    json_path = out_dir / f"{name}.json"
    json_path.write_text(canonical_json(doc) + "\n")
    rows = ["key,value"]
    _flatten("", doc, rows)
    (out_dir / f"{name}.csv").write_text("\n".join(rows) + "\n")
    return json_path


def _flatten(prefix: str, node, rows: list) -> None:
    if isinstance(node, dict):
        for key in sorted(node):
            _flatten(f"{prefix}{key}." if not prefix else f"{prefix}{key}.", node[key], rows)
    elif isinstance(node, (list, tuple)):
        for idx, item in enumerate(node):
            _flatten(f"{prefix}{idx}.", item, rows)
    else:
        rows.append(f"{prefix.rstrip('.')},{node}")


def _sanitize_token(token: str) -> str:
    return token.strip().replace("<", "").replace(">", "").replace("_", "-")


# ---------------------------------------------------------------------------
# Commands


def cmd_localize(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    backend = build_backend(cfg)
    image_path = Path(args.image)
    if not image_path.exists():
        return _fail(EXIT_INPUT, "input_not_found", f"image not found: {image_path}")
    image = load_image(image_path)
    result = localize(image, backend.retrieve_concepts, backend.segment, cfg.localization)
    out_dir = _workdir(args, cfg) / image_path.stem
    write_manifest(result, image, out_dir, config_hash=cfg.config_hash())
    sys.stdout.write(
        canonical_json(
            {
                "records": len(result.records),
                "termination": result.termination,
                "final_proportion": result.final_proportion,
                "out": str(out_dir),
            }
        )
        + "\n"
    )
    return EXIT_OK


def cmd_learn(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    backend = build_backend(cfg)
    manifest_dir = Path(args.manifest)
    if not manifest_dir.exists():
        return _fail(EXIT_INPUT, "input_not_found", f"manifest not found: {manifest_dir}")
    loc, image = read_manifest(manifest_dir)
    if not loc.records:
        return _fail(EXIT_INPUT, "empty_manifest", "stage-one manifest has no records to learn from")
    out_dir = _workdir(args, cfg) / "store"
    state = start_run(loc, image, backend, axes=cfg.axes, schedule=cfg.schedule, weights=cfg.weights)
    try:
        train_phase_one(state, backend)
        train_phase_two(state, backend)
        refine(state, backend)
    except TrainingDivergedError as exc:
        export_concepts(state, backend, out_dir, config_hash=cfg.config_hash())
        (out_dir / "abort.json").write_text(
            canonical_json({"error": "training_diverged", "message": str(exc)}) + "\n"
        )
        return _fail(EXIT_NUMERIC, "training_diverged", str(exc))
    export_concepts(state, backend, out_dir, config_hash=cfg.config_hash())
    sys.stdout.write(canonical_json({"store": str(out_dir), "phase": state.phase}) + "\n")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = load_config(args.config, seed_override=None)
    backend = build_backend(cfg)
    store_dir = Path(args.store)
    if not store_dir.exists():
        return _fail(EXIT_INPUT, "input_not_found", f"store not found: {store_dir}")
    store = import_concepts(store_dir)
    store.register_into(backend)
    if args.tokens:
        filler = args.tokens
    elif args.concept:
        matches = [e for e in store.manifest["concepts"] if f"obj{e['order']}" == args.concept]
        if not matches:
            return _fail(EXIT_INPUT, "unknown_concept", f"concept {args.concept!r} not in store")
        filler = store.prompt_filler(matches[0])
    else:
        return _fail(EXIT_INPUT, "missing_composition", "pass --tokens or --concept")
    prompt = args.template.replace("{}", filler)
    condition = backend.encode_text(prompt)
    out_dir = _workdir(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    name_part = "+".join(_sanitize_token(t) for t in condition.tokens if t.startswith("<"))
    image = backend.generate(condition, args.gen_seed)
    path = out_dir / f"gen_{name_part}_seed{args.gen_seed}.png"
    save_image(image, path)
    sys.stdout.write(canonical_json({"image": str(path), "prompt": prompt}) + "\n")
    return EXIT_OK


def _load_mask_dir(path: Path) -> list:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise EvaluationError(f"no mask PNGs found in {path}")
    return [load_mask_png(p) for p in files]


def cmd_eval_masks(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for p in (pred_dir, gt_dir):
        if not p.exists():
            return _fail(EXIT_INPUT, "input_not_found", f"mask directory not found: {p}")
    report = evaluate_masks(_load_mask_dir(pred_dir), _load_mask_dir(gt_dir))
    doc = {
        "protocol": {"matching": "hungarian", "similarity": "iou"},
        "assignment": [list(p) for p in report.assignment],
        "per_pair": list(report.per_pair),
        "aggregate": report.aggregate,
        "unmatched_pred": report.unmatched_pred,
        "unmatched_gt": report.unmatched_gt,
    }
    path = _write_report(doc, _workdir(args, None), "masks_report")
    sys.stdout.write(canonical_json({"report": str(path), "aggregate": report.aggregate}) + "\n")
    return EXIT_OK


def _uce_inputs(args):
    cfg = load_config(args.config, seed_override=None)
    backend = build_backend(cfg)
    store_dir = Path(args.store)
    manifest_dir = Path(args.manifest)
    if not store_dir.exists():
        raise FileNotFoundError(f"store not found: {store_dir}")
    if not manifest_dir.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_dir}")
    store = import_concepts(store_dir)
    store.register_into(backend)
    loc, image = read_manifest(manifest_dir)
    encoder = SyntheticEncoder(backend)
    return cfg, backend, store, loc, image, encoder


def cmd_eval_uce(args) -> int:
    cfg, backend, store, loc, image, encoder = _uce_inputs(args)
    entries = sorted(store.manifest["concepts"], key=lambda e: e["order"])
    masks = {rec.order: rec.mask for rec in loc.records}
    concept_images = []
    crops = []
    fillers = []
    for entry in entries:
        if entry["order"] not in masks:
            raise EvaluationError(f"manifest lacks a mask for concept order {entry['order']}")
        filler = store.prompt_filler(entry)
        fillers.append(filler)
        condition = backend.encode_text(UCE_TEMPLATE.replace("{}", filler))
        concept_images.append([backend.generate(condition, s) for s in UCE_SEEDS])
        crops.append(apply_mask(image, masks[entry["order"]].complement()))
    composed_condition = backend.encode_text(UCE_TEMPLATE.replace("{}", ", ".join(fillers)))
    composed = [backend.generate(composed_condition, s) for s in UCE_SEEDS]

    k3 = min(3, len(entries))
    metrics = {
        "sim_identity": sim_identity(concept_images, crops, encoder),
        "sim_composition": sim_composition(composed, image, encoder),
        "acc_top1": acc_topk(concept_images, crops, 1, encoder),
        "acc_top3": acc_topk(concept_images, crops, k3, encoder),
    }
    per_concept = []
    for entry, images, crop in zip(entries, concept_images, crops):
        per_concept.append(
            {
                "concept": f"obj{entry['order']}",
                "label": entry["label"],
                "sim_identity": sim_identity([images], [crop], encoder),
            }
        )
    doc = {
        "protocol": {
            "images_per_concept": len(UCE_SEEDS),
            "seeds": list(UCE_SEEDS),
            "template": UCE_TEMPLATE,
            "composition": "per-concept intrinsic tokens joined with conspec",
            "acc_top3_k": k3,
            "sim_mode": "raw",
        },
        "encoder_id": encoder.encoder_id,
        "per_image": [{"image": Path(args.manifest).name, "per_concept": per_concept}],
        "aggregate": metrics,
    }
    out_dir = _workdir(args, cfg)
    path = _write_report(doc, out_dir, "uce_report", cfg.config_hash())
    if args.plot:
        _emit_plots(store, per_concept, metrics, out_dir)
    sys.stdout.write(canonical_json({"report": str(path), "aggregate": metrics}) + "\n")
    return EXIT_OK


def _emit_plots(store, per_concept, metrics, out_dir: Path) -> None:
    history = store.loss_history
    if history:
        series = [
            (name, [row[name] for row in history]) for name in ("recon", "att", "triplet", "total")
        ]
        svg.line_chart(series, out_dir / "loss_curves.svg", title="training loss per step")
    svg.bar_chart(
        [p["concept"] for p in per_concept],
        [p["sim_identity"] for p in per_concept],
        out_dir / "per_concept_identity.svg",
        title="identity similarity per concept",
    )
    svg.bar_chart(
        sorted(metrics),
        [metrics[k] for k in sorted(metrics)],
        out_dir / "metrics.svg",
        title="aggregate metrics",
    )


def cmd_eval_icbench(args) -> int:
    desc_path = Path(args.descriptions)
    if not desc_path.exists():
        return _fail(EXIT_MISSING, "descriptions_missing", f"descriptions fixture not found: {desc_path}")
    cfg, backend, store, loc, image, encoder = _uce_inputs(args)
    doc = json.loads(desc_path.read_text())
    image_id = args.image_id or Path(args.manifest).name
    if image_id in doc:
        descriptions = doc[image_id]
    elif all(key.startswith("obj") for key in doc):
        descriptions = doc
    else:
        return _fail(
            EXIT_MISSING,
            "descriptions_missing",
            f"no entry for image {image_id!r} in {desc_path}",
        )
    concepts = {}
    for entry in store.manifest["concepts"]:
        cid = f"obj{entry['order']}"
        token_by_axis = {"object": entry["tokens"]["conspec"]["id"]}
        for axis in store.manifest["axes"]:
            token_by_axis[axis["name"]] = entry["tokens"]["intrinsics"][axis["name"]]["id"]
        concepts[cid] = token_by_axis
    scores = icbench_scores(concepts, descriptions, backend, encoder, seeds=UCE_SEEDS)
    doc_out = {
        "protocol": {
            "images_per_token": len(UCE_SEEDS),
            "seeds": list(UCE_SEEDS),
            "text_prompt": "a photo of <token>",
            "sim_mode": "mapped01",
        },
        "encoder_id": encoder.encoder_id,
        "per_axis": scores,
    }
    path = _write_report(doc_out, _workdir(args, cfg), "icbench_report", cfg.config_hash())
    sys.stdout.write(canonical_json({"report": str(path), "per_axis": scores}) + "\n")
    return EXIT_OK


def cmd_eval_pixels(args) -> int:
    pred_path, gt_path = Path(args.pred), Path(args.gt)
    for p in (pred_path, gt_path):
        if not p.exists():
            return _fail(EXIT_INPUT, "input_not_found", f"label grid not found: {p}")
    from PIL import Image as PILImage

    pred = np.asarray(PILImage.open(pred_path).convert("L"), dtype=np.int64)
    gt = np.asarray(PILImage.open(gt_path).convert("L"), dtype=np.int64)
    aligned = not args.no_align
    if aligned:
        pred = hungarian_align_labels(pred, gt)
    metrics = pixel_label_metrics(pred, gt)
    doc = {"protocol": {"hungarian_aligned": aligned}, "metrics": metrics}
    path = _write_report(doc, _workdir(args, None), "pixels_report")
    sys.stdout.write(canonical_json({"report": str(path), "metrics": metrics}) + "\n")
    return EXIT_OK


def cmd_world_synth(args) -> int:
    world = make_world(seed=args.seed or 0, num_shapes=args.shapes, size=tuple(args.size))
    out_dir = Path(args.out) if args.out else _workdir(args, None) / "world"
    save_world(world, out_dir)
    save_image(world.image, out_dir / "image.png")
    labels = (world.label_grid + 1).astype(np.uint8)
    from PIL import Image as PILImage

    PILImage.fromarray(labels, mode="L").save(out_dir / "labels.png", format="PNG")
    sys.stdout.write(
        canonical_json(
            {
                "world": str(out_dir / "world.json"),
                "image": str(out_dir / "image.png"),
                "shapes": [
                    {"category": s.category, "colour": s.colour, "material": s.material}
                    for s in world.shapes
                ],
            }
        )
        + "\n"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ice", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("localize", help="stage one: extract concepts and masks from an image")
    p.add_argument("image")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: config workdir or $ICE_WORKDIR)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("learn", help="stage two: learn token embeddings from a stage-one manifest")
    p.add_argument("manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("generate", help="render images from stored token compositions")
    p.add_argument("--config", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--tokens", help="prompt filler, e.g. '<obj0_colour> & <obj0_conspec>'")
    p.add_argument("--concept", help="compose all tokens of one concept, e.g. obj0")
    p.add_argument("--template", default=UCE_TEMPLATE)
    p.add_argument("--seed", dest="gen_seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    pe = sub.add_parser("eval", help="metric reports")
    esub = pe.add_subparsers(dest="eval_command", required=True)

    p = esub.add_parser("masks", help="Hungarian-matched mask quality")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_masks)

    p = esub.add_parser("uce", help="concept similarity and classification metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_eval_uce)

    p = esub.add_parser("icbench", help="intrinsic-axis description match")
    p.add_argument("--config", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--descriptions", required=True)
    p.add_argument("--image-id")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_icbench)

    p = esub.add_parser("pixels", help="pixel labeling accuracy and mIoU")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.add_argument("--no-align", action="store_true")
    p.set_defaults(func=cmd_eval_pixels)

    pw = sub.add_parser("world", help="synthetic world fixtures")
    wsub = pw.add_subparsers(dest="world_command", required=True)
    p = wsub.add_parser("synth", help="emit a synthetic world fixture")
    p.add_argument("--out")
    p.add_argument("--shapes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, nargs=2, default=(32, 32), metavar=("H", "W"))
    p.set_defaults(func=cmd_world_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_INPUT, "config_invalid", str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_INPUT, "input_not_found", str(exc))
    except StoreError as exc:
        return _fail(EXIT_INPUT, "store_invalid", str(exc))
    except TrainingDivergedError as exc:
        return _fail(EXIT_NUMERIC, "training_diverged", str(exc))
    except (DegenerateDistributionError, DegenerateRegionError) as exc:
        return _fail(EXIT_NUMERIC, "numeric_failure", str(exc))
    except EvaluationError as exc:
        return _fail(EXIT_INPUT, "invalid_input", str(exc))
    except IceError as exc:
        return _fail(EXIT_INPUT, "invalid_input", str(exc))


if __name__ == "__main__":
    sys.exit(main())
