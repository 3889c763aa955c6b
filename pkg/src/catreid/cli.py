"""Single entry point wiring the toolkit into a command-line workflow.

Exit codes: 0 success, 2 usage error, 3 missing file or bad configuration,
4 data validation failure, 1 anything unexpected.  Every run writes a
run_manifest.json beside its outputs so it can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig, augment
from .data import (Dataset, ManifestError, PartitionSetting, dedup_sequences,
                   derive_entities, drop_unpartitionable, load_manifest,
                   split_train_test, write_manifest)
from .evaluate import EvalProtocol, evaluate, render_ranking_sheet
from .export import (export_embeddings, plot_projection, project_2d,
                     read_embedding_table)
from .geometry import PartConfig, draw_crops, part_crops
from .toydata import generate_toy_dataset
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INVALID = 4


def _write_run_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "toolkit_version": __version__,
        "subcommand": subcommand,
        "config_path": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "output_dir": str(out_dir),
        "argv": getattr(args, "_argv", sys.argv[1:]),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2)


def _image_root(args, manifest_path: Path) -> Path:
    if getattr(args, "image_root", None):
        return Path(args.image_root)
    return manifest_path.parent


def _rebase_paths(dataset: Dataset, src_dir: Path, dst_dir: Path) -> Dataset:
    """Rewrite relative image paths so split manifests stay self-locating."""
    rebased = []
    for rec in dataset.records:
        absolute = (src_dir / rec.image_path).resolve()
        from dataclasses import replace

        rebased.append(replace(
            rec, image_path=os.path.relpath(absolute, dst_dir.resolve())))
    return Dataset(records=rebased, entity_of=dict(dataset.entity_of),
                   partition=dataset.partition)


# -- subcommand bodies --------------------------------------------------------


def cmd_ingest(args) -> int:
    out_dir = Path(args.out)
    manifest_path = Path(args.manifest)
    dataset = load_manifest(manifest_path, skip_invalid=args.skip_invalid)
    total = len(dataset)
    dataset, dropped = drop_unpartitionable(dataset)
    deduped = 0
    if args.dedup_seconds is not None:
        before = len(dataset)
        dataset = dedup_sequences(dataset, args.dedup_seconds)
        deduped = before - len(dataset)
    setting = PartitionSetting(use_side=args.use_side, use_time=args.use_time)
    dataset = derive_entities(dataset, setting)
    train_set, test_set = split_train_test(dataset, args.ratio, args.seed)

    _write_run_manifest(out_dir, "ingest", args)
    src_dir = manifest_path.parent
    write_manifest(_rebase_paths(train_set, src_dir, out_dir),
                   out_dir / "train_manifest.jsonl")
    write_manifest(_rebase_paths(test_set, src_dir, out_dir),
                   out_dir / "test_manifest.jsonl")
    summary = {
        "input_records": total,
        "dropped_unpartitionable": dropped,
        "dropped_sequence_duplicates": deduped,
        "partition": asdict(setting),
        "entities_total": len(dataset.entities()),
        "train": {"cats": len(train_set.cats()),
                  "entities": len(train_set.entities()),
                  "images": len(train_set)},
        "test": {"cats": len(test_set.cats()),
                 "entities": len(test_set.entities()),
                 "images": len(test_set)},
    }
    with open(out_dir / "ingest_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_crop_preview(args) -> int:
    import cv2

    from .inputs import load_rgb

    manifest_path = Path(args.manifest)
    dataset = load_manifest(manifest_path)
    root = _image_root(args, manifest_path)
    out_dir = Path(args.out)
    _write_run_manifest(out_dir, "crop-preview", args)
    config = PartConfig()
    count = 0
    for idx, rec in enumerate(dataset.records[:args.limit]):
        image = load_rgb(root / rec.image_path)
        crops = part_crops(rec.keypoints, config)
        canvas = draw_crops(image, crops, rec.keypoints)
        x, y, w, h = rec.bbox
        cv2.rectangle(canvas, (int(x), int(y)), (int(x + w), int(y + h)),
                      (255, 255, 255), 1)
        out_path = out_dir / f"crops_{idx:03d}.png"
        cv2.imwrite(str(out_path), cv2.cvtColor(canvas, cv2.COLOR_RGB2BGR))
        count += 1
    print(f"wrote {count} overlay image(s) to {out_dir}")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    import cv2

    from .inputs import crop_bbox, load_rgb

    manifest_path = Path(args.manifest)
    dataset = load_manifest(manifest_path)
    if not dataset.records:
        raise ManifestError("manifest holds no records")
    rec = dataset.records[args.index]
    root = _image_root(args, manifest_path)
    image = load_rgb(root / rec.image_path)
    crop, _ = crop_bbox(image, rec.bbox)

    config = AugmentConfig()
    if args.config:
        config = TrainConfig.from_yaml(args.config).augment

    tiles = [crop]
    for i in range(args.count):
        tiles.append(augment(crop, config, seed=args.seed + i))
    h = min(t.shape[0] for t in tiles)
    scaled = [cv2.resize(t, (int(t.shape[1] * h / t.shape[0]), h))
              for t in tiles]
    sheet = np.concatenate(scaled, axis=1)
    out_dir = Path(args.out)
    _write_run_manifest(out_dir, "augment-preview", args)
    out_path = out_dir / "augment_preview.png"
    cv2.imwrite(str(out_path), cv2.cvtColor(sheet, cv2.COLOR_RGB2BGR))
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = TrainConfig.from_yaml(args.config)
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)
    manifest_path = Path(args.manifest)
    dataset = load_manifest(manifest_path)
    dataset, _ = drop_unpartitionable(dataset)
    out_dir = Path(args.out)
    _write_run_manifest(out_dir, "train", args)

    forbidden = None
    if args.exclude_manifest:
        held_out = load_manifest(args.exclude_manifest)
        forbidden = {r.image_path for r in held_out.records}

    val_set = None
    val_root = None
    if args.val_manifest:
        val_path = Path(args.val_manifest)
        val_set, _ = drop_unpartitionable(load_manifest(val_path))
        val_root = val_path.parent

    result = train(config, dataset, out_dir,
                   image_root=_image_root(args, manifest_path),
                   resume_from=args.resume,
                   forbidden_image_paths=forbidden,
                   val_set=val_set, val_image_root=val_root)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return EXIT_OK


def _load_eval_dataset(manifest_path: Path, checkpoint: str) -> Dataset:
    import torch

    payload = torch.load(checkpoint, map_location="cpu", weights_only=False)
    part = payload.get("partition") or {"use_side": True, "use_time": True}
    dataset = load_manifest(manifest_path)
    dataset, _ = drop_unpartitionable(dataset)
    return derive_entities(dataset, PartitionSetting(**part))


def cmd_eval(args) -> int:
    manifest_path = Path(args.manifest)
    dataset = _load_eval_dataset(manifest_path, args.checkpoint)
    protocol = EvalProtocol(max_rank=args.max_rank)
    report = evaluate(args.checkpoint, dataset, protocol,
                      image_root=_image_root(args, manifest_path))
    out_dir = Path(args.out)
    _write_run_manifest(out_dir, "eval", args)
    report.to_json(out_dir / "eval_report.json")
    report.write_rankings_csv(out_dir / "rankings.csv",
                              ids=[r.image_path for r in dataset.records])
    print(f"mAP={report.map_score:.4f} rank1={report.rank1:.4f} "
          f"queries={report.num_queries} skipped={report.num_skipped}")
    return EXIT_OK


def cmd_query(args) -> int:
    manifest_path = Path(args.manifest)
    dataset = _load_eval_dataset(manifest_path, args.checkpoint)
    if args.query_id is not None:
        matches = [i for i, r in enumerate(dataset.records)
                   if r.image_path == args.query_id]
        if not matches:
            raise ManifestError(f"query id {args.query_id!r} not in manifest")
        query_index = matches[0]
    else:
        query_index = args.query_index
    report = evaluate(args.checkpoint, dataset,
                      EvalProtocol(max_rank=max(args.k, 1)),
                      image_root=_image_root(args, manifest_path))
    out_dir = Path(args.out)
    _write_run_manifest(out_dir, "query", args)
    out_path = out_dir / f"ranking_q{query_index}.png"
    render_ranking_sheet(report, dataset, query_index, args.k, out_path,
                         image_root=_image_root(args, manifest_path))
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    manifest_path = Path(args.manifest)
    dataset = _load_eval_dataset(manifest_path, args.checkpoint)
    out_file = Path(args.out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    _write_run_manifest(out_file.parent, "export-embeddings", args)
    table = export_embeddings(args.checkpoint, dataset, out_file,
                              image_root=_image_root(args, manifest_path))
    print(f"wrote {len(table.record_ids)} embedding row(s) to {out_file}")
    return EXIT_OK


def cmd_project(args) -> int:
    table = read_embedding_table(args.embeddings)
    rows = project_2d(table, method=args.method,
                      projector_command=args.projector_cmd)
    out_dir = Path(args.out)
    _write_run_manifest(out_dir, "project", args)
    out_csv = out_dir / "projection.csv"
    with open(out_csv, "w") as fh:
        fh.write("record_id,x,y\n")
        for rid, x, y in rows:
            fh.write(f"{rid},{x:.10e},{y:.10e}\n")
    if args.plot:
        plot_projection(rows, table, out_dir / "projection.png")
    print(f"wrote {out_csv}")
    return EXIT_OK


def cmd_toy_data(args) -> int:
    out_dir = Path(args.out)
    _write_run_manifest(out_dir, "toy-data", args)
    manifest = generate_toy_dataset(
        out_dir, cats=args.cats, images_per_entity=args.images_per_entity,
        seed=args.seed, day_cats=args.day_cats)
    print(f"wrote {manifest}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="catreid",
        description="Part-pose-guided re-identification toolkit for feral "
                    "cats: ingest camera-trap manifests, train the "
                    "multi-stream embedding model, evaluate retrieval.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("ingest", help="validate, partition and split a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--use-side", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--use-time", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--dedup-seconds", type=float, default=None,
                   help="drop burst frames closer than this many seconds")
    p.add_argument("--skip-invalid", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("crop-preview", help="render part-quad overlays to PNG")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-root")
    p.add_argument("--limit", type=int, default=8)
    p.set_defaults(func=cmd_crop_preview)

    p = sub.add_parser("augment-preview",
                       help="write an augmentation contact sheet")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-root")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="training YAML whose augment block to use")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("train", help="train the multi-stream model")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-root")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--exclude-manifest",
                   help="held-out manifest used as a leakage guard")
    p.add_argument("--val-manifest",
                   help="validation split; keeps best_checkpoint.pt by Rank-1")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="leave-one-out retrieval evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-root")
    p.add_argument("--max-rank", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("query", help="render a ranking sheet for one query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-root")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--query-index", type=int)
    group.add_argument("--query-id")
    p.add_argument("--k", type=int, default=7)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("export-embeddings", help="write the embedding CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-file", required=True)
    p.add_argument("--image-root")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("project", help="2D projection of an embedding CSV")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="linear-principal",
                   choices=["linear-principal", "external"])
    p.add_argument("--projector-cmd",
                   help="external command reading the table CSV on stdin")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("toy-data", help="generate the synthetic cat dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cats", type=int, default=4)
    p.add_argument("--images-per-entity", type=int, default=20)
    p.add_argument("--day-cats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = list(argv) if argv is not None else sys.argv[1:]
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"catreid-error code={EXIT_MISSING} msg={exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ManifestError,) as exc:
        print(f"catreid-error code={EXIT_INVALID} msg={exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"catreid-error code={EXIT_INVALID} msg={exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # pragma: no cover - unexpected failures
        print(f"catreid-error code=1 msg={type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
