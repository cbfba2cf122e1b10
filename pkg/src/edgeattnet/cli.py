"""Command-line interface: preprocess, synth, train, predict, evaluate, params.

Every command writes its merged run configuration (and a content hash of it)
next to its outputs; reruns with the same configuration and seed are
byte-identical. Exit codes: 0 success or partial success, 1 usage error,
2 runtime failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import glob
import hashlib
import json
import os
import sys

import numpy as np

from .data import (SyntheticConfig, build_samples, generate_synthetic,
                   load_annotations, load_sample_cache, split,
                   write_sample_cache)
from .imgio import read_gray, read_mask, write_mask_png, write_overlay_png, write_png
from .metrics import (MaskSet, NoEvaluablePairsError, ScaleSet,
                      evaluate_dataset, evaluate_image, extract_instances)
from .model import (Model, ModelSpec, VARIANTS, load_model, param_report)
from .preprocess import DiskNotFoundError, PipelineConfig, run_pipeline
from .tensor import Tensor
from .train import TrainingDivergedError, train_model

CLI_VARIANTS = {"unet": "unet", "mhsa-nope": "mhsa_nope",
                "mhsa-pe": "mhsa_pe", "edgeattnet": "edgeattnet"}


def worker_count() -> int:
    cap = os.environ.get("EDGEATTNET_THREADS")
    if cap:
        return max(1, int(cap))
    return min(4, os.cpu_count() or 1)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_run_config(out_dir: str, cfg: dict):
    os.makedirs(out_dir, exist_ok=True)
    payload = dict(cfg)
    payload["config_hash"] = config_hash(cfg)
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return payload["config_hash"]


def _merge_config(args: argparse.Namespace, keys) -> dict:
    """File config overridden by explicitly passed flags."""
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
    merged = {}
    for key, default in keys.items():
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            merged[key] = cli_val
        elif key in file_cfg:
            merged[key] = file_cfg[key]
        else:
            merged[key] = default
    return merged


def _parse_scales(text) -> ScaleSet:
    if isinstance(text, (list, tuple)):
        return ScaleSet(tuple(float(v) for v in text))
    return ScaleSet(tuple(float(v) for v in str(text).split(",")))


def _list_images(path: str):
    files = []
    for ext in ("*.png", "*.pgm"):
        files.extend(glob.glob(os.path.join(path, ext)))
    return sorted(files)


# ---------------------------------------------------------------------------
# preprocess


def cmd_preprocess(args) -> int:
    cfg = _merge_config(args, {"input": None, "output": None})
    if not cfg["input"] or not cfg["output"]:
        print("preprocess: --input and --output are required", file=sys.stderr)
        return 1
    files = _list_images(cfg["input"])
    if not files:
        print(f"preprocess: no .png/.pgm images under {cfg['input']}", file=sys.stderr)
        return 1
    out_dir = cfg["output"]
    write_run_config(out_dir, {"command": "preprocess", **cfg})

    def one(path):
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(out_dir, f"{stem}.png")
        processed, geom = run_pipeline(read_gray(path), PipelineConfig())
        write_png(out_path, processed.pixels)
        return {"input": path, "output": out_path,
                "disk": {"cx": geom.cx, "cy": geom.cy, "r": geom.r}}

    entries, failures = [], []
    with concurrent.futures.ThreadPoolExecutor(max_workers=worker_count()) as pool:
        futures = {pool.submit(one, p): p for p in files}
        for fut in concurrent.futures.as_completed(futures):
            path = futures[fut]
            try:
                entries.append(fut.result())
            except (DiskNotFoundError, ValueError, OSError) as exc:
                failures.append({"input": path, "error": str(exc)})
                print(f"preprocess: {path}: {exc}", file=sys.stderr)
    entries.sort(key=lambda e: e["input"])
    failures.sort(key=lambda e: e["input"])
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump({"processed": entries, "failures": failures}, fh,
                  indent=2, sort_keys=True)
    print(f"preprocess: {len(entries)} ok, {len(failures)} failed -> {out_dir}")
    return 0 if entries else 2


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    keys = {"output": None, "count": 8, "image_size": 64, "seed": 0,
            "noise_sigma": 0.01, "contrast": 0.35,
            "filaments": None, "barbs": None}
    cfg = _merge_config(args, keys)
    if not cfg["output"]:
        print("synth: --output is required", file=sys.stderr)
        return 1
    syn = SyntheticConfig(n_images=cfg["count"], image_size=cfg["image_size"],
                          seed=cfg["seed"], noise_sigma=cfg["noise_sigma"],
                          contrast=cfg["contrast"])
    if cfg["filaments"]:
        lo, hi = (int(v) for v in str(cfg["filaments"]).split(","))
        syn.filaments_per_image = (lo, hi)
    if cfg["barbs"]:
        lo, hi = (int(v) for v in str(cfg["barbs"]).split(","))
        syn.barbs_per_filament = (lo, hi)
    items = generate_synthetic(syn)
    write_sample_cache(cfg["output"], items)
    write_run_config(cfg["output"], {"command": "synth", **cfg,
                                     "synthetic": json.loads(syn.to_json())})
    print(f"synth: wrote {len(items)} samples -> {cfg['output']}")
    return 0


# ---------------------------------------------------------------------------
# train


def _load_dataset(data: str):
    """A sample-cache directory, or 'annotations.json:image_dir' for COCO input."""
    if ":" in data and not os.path.isdir(data):
        ann_path, image_dir = data.split(":", 1)
        records, _ = load_annotations(ann_path)
        samples, _ = build_samples(records, image_dir)
        return samples
    return load_sample_cache(data)


def cmd_train(args) -> int:
    keys = {"data": None, "output": None, "variant": "edgeattnet",
            "epochs": 50, "lr": 1e-4, "batch": 4, "seed": 0,
            "input_size": None, "threshold": 0.5, "scales": None,
            "train_count": None, "val_count": None, "test_count": None,
            "encoder_channels": None, "heads": 4, "head_dim": None,
            "dropout": 0.1}
    cfg = _merge_config(args, keys)
    if not cfg["data"] or not cfg["output"]:
        print("train: --data and --output are required", file=sys.stderr)
        return 1
    variant = CLI_VARIANTS.get(cfg["variant"], cfg["variant"])
    if variant not in VARIANTS:
        print(f"train: unknown variant {cfg['variant']}", file=sys.stderr)
        return 1
    try:
        samples = _load_dataset(cfg["data"])
        if not samples:
            print("train: dataset is empty", file=sys.stderr)
            return 2
        size = samples[0].image.pixels.shape
        input_size = (tuple(int(v) for v in str(cfg["input_size"]).split(","))
                      if cfg["input_size"] else size)
        n = len(samples)
        n_train = cfg["train_count"] if cfg["train_count"] is not None else max(1, int(0.75 * n))
        n_val = cfg["val_count"] if cfg["val_count"] is not None else max(1, int(0.125 * n))
        n_test = cfg["test_count"] if cfg["test_count"] is not None else n - n_train - n_val
        train_s, val_s, test_s = split(samples, n_train, n_val, n_test, seed=cfg["seed"])

        enc = (tuple(int(v) for v in str(cfg["encoder_channels"]).split(","))
               if cfg["encoder_channels"] else (64, 128, 256, 512))
        head_dim = cfg["head_dim"] if cfg["head_dim"] is not None else enc[-1] // cfg["heads"]
        spec = ModelSpec(variant, encoder_channels=enc, heads=cfg["heads"],
                         head_dim=head_dim, dropout_p=cfg["dropout"],
                         input_size=input_size)
        model = Model(spec, seed=cfg["seed"])

        out_dir = cfg["output"]
        write_run_config(out_dir, {"command": "train", **cfg, "variant": variant,
                                   "resolved_split": [n_train, n_val, n_test]})
        with open(os.path.join(out_dir, "splits.json"), "w") as fh:
            json.dump({"train": [s.image_id for s in train_s],
                       "val": [s.image_id for s in val_s],
                       "test": [s.image_id for s in test_s]}, fh,
                      indent=2, sort_keys=True)
        scales = _parse_scales(cfg["scales"]) if cfg["scales"] else ScaleSet()
        result = train_model(model, train_s, val_s, epochs=cfg["epochs"],
                             lr=cfg["lr"], batch_size=cfg["batch"],
                             seed=cfg["seed"], out_dir=out_dir,
                             threshold=cfg["threshold"], scales=scales)
        print(f"train: {cfg['epochs']} epoch(s), best val loss "
              f"{result.best_val_loss:.6f} at epoch {result.best_epoch} -> {out_dir}")
        return 0
    except TrainingDivergedError as exc:
        print(f"train: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"train: {exc}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args) -> int:
    keys = {"checkpoint": None, "input": None, "output": None,
            "threshold": 0.5, "overlay": False}
    cfg = _merge_config(args, keys)
    if not cfg["checkpoint"] or not cfg["input"] or not cfg["output"]:
        print("predict: --checkpoint, --input and --output are required", file=sys.stderr)
        return 1
    try:
        model = load_model(cfg["checkpoint"])
    except (OSError, ValueError) as exc:
        print(f"predict: cannot load checkpoint: {exc}", file=sys.stderr)
        return 2
    if os.path.isdir(os.path.join(cfg["input"], "images")):
        files = _list_images(os.path.join(cfg["input"], "images"))
    else:
        files = _list_images(cfg["input"])
    if not files:
        print(f"predict: no images under {cfg['input']}", file=sys.stderr)
        return 1
    out_dir = cfg["output"]
    write_run_config(out_dir, {"command": "predict", **cfg,
                               "variant": model.spec.variant})
    expect = model.spec.input_size
    for path in files:
        img = read_gray(path)
        if img.pixels.shape != expect:
            print(f"predict: {path}: image {img.pixels.shape} does not match "
                  f"model input size {expect}", file=sys.stderr)
            return 2
        prob = model.predict_proba(Tensor(img.pixels[None, None]))
        mask = prob[0, 0] >= cfg["threshold"]
        stem = os.path.splitext(os.path.basename(path))[0]
        write_mask_png(os.path.join(out_dir, f"{stem}_pred.png"), mask)
        if cfg["overlay"]:
            write_overlay_png(os.path.join(out_dir, f"{stem}_overlay.png"),
                              img.pixels, mask)
    print(f"predict: {len(files)} mask(s) -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _ground_truth_sets(gt_path: str):
    if os.path.isdir(gt_path):
        return {s.image_id: s.gt_set() for s in load_sample_cache(gt_path)}
    records, _ = load_annotations(gt_path)
    from .data import rasterize_polygon
    from .metrics import InstanceMask
    sets = {}
    for rec in records:
        instances = []
        for poly in rec.polygons:
            bits = rasterize_polygon(poly, rec.width, rec.height)
            if bits.any():
                instances.append(InstanceMask(bits))
        if instances:
            sets[rec.image_id] = MaskSet(image_id=rec.image_id, instances=instances)
    return sets


def cmd_evaluate(args) -> int:
    keys = {"predictions": None, "ground_truth": None, "output": None,
            "scales": "1,0.5,0.25,0.125,0.0625", "threshold": 0.5,
            "min_area": 10}
    cfg = _merge_config(args, keys)
    if not cfg["predictions"] or not cfg["ground_truth"] or not cfg["output"]:
        print("evaluate: --predictions, --ground-truth and --output are required",
              file=sys.stderr)
        return 1
    try:
        scales = _parse_scales(cfg["scales"])
        gt_sets = _ground_truth_sets(cfg["ground_truth"])
    except (ValueError, OSError) as exc:
        print(f"evaluate: {exc}", file=sys.stderr)
        return 2
    pred_files = {}
    for path in _list_images(cfg["predictions"]):
        stem = os.path.splitext(os.path.basename(path))[0]
        if stem.endswith("_pred"):
            stem = stem[:-5]
        pred_files[stem] = path
    matched = sorted(set(gt_sets) & set(pred_files))
    missing_pred = sorted(set(gt_sets) - set(pred_files))
    missing_gt = sorted(set(pred_files) - set(gt_sets))
    for m in missing_pred:
        print(f"evaluate: no prediction for image {m}", file=sys.stderr)
    for m in missing_gt:
        print(f"evaluate: prediction {m} has no ground truth", file=sys.stderr)
    if not matched:
        print("evaluate: no matching prediction/ground-truth ids", file=sys.stderr)
        return 2

    out_dir = cfg["output"]
    run_hash = write_run_config(out_dir, {"command": "evaluate", **cfg})
    records = []
    for image_id in matched:
        bits = read_mask(pred_files[image_id])
        pt_set = extract_instances(image_id, bits, threshold=0.5,
                                   min_area=cfg["min_area"])
        records.append(evaluate_image(gt_sets[image_id], pt_set, scales))
    try:
        report = evaluate_dataset(records, scales)
    except NoEvaluablePairsError as exc:
        print(f"evaluate: {exc}", file=sys.stderr)
        return 2
    doc = report.to_dict()
    doc["config_hash"] = run_hash
    doc["unmatched"] = {"missing_predictions": missing_pred,
                        "missing_ground_truth": missing_gt}
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "pair_scores.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "gt_index", "pt_index",
                         "iou_pairwise", "iou_multiscale"])
        for rec in report.per_image:
            for gi, pj, iou, ms in rec.pairs:
                writer.writerow([rec.image_id, gi, pj, repr(iou), repr(ms)])
    print(f"evaluate: mIoU_pairwise={report.miou_pairwise:.4f} "
          f"mIoU_multiscale={report.miou_multiscale:.4f} "
          f"({report.n_evaluated}/{report.n_images} images) -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# params


def cmd_params(args) -> int:
    keys = {"variant": "all", "input_size": "256,256", "json_out": None}
    cfg = _merge_config(args, keys)
    size = tuple(int(v) for v in str(cfg["input_size"]).split(","))
    which = cfg["variant"]
    variants = list(VARIANTS) if which == "all" else [CLI_VARIANTS.get(which, which)]
    if any(v not in VARIANTS for v in variants):
        print(f"params: unknown variant {which}", file=sys.stderr)
        return 1
    reports = {}
    for v in variants:
        rep = param_report(ModelSpec(v, input_size=size))
        reports[v] = rep
        print(f"\n{v}  (input {size[0]}x{size[1]})")
        for row in rep["layers"]:
            print(f"  {row['layer']:<18s} {row['count']:>12,}")
        print(f"  {'total':<18s} {rep['total']:>12,}")
        if rep["reference_total"] is not None:
            print(f"  {'reference':<18s} {rep['reference_total']:>12,}"
                  f"   residual {rep['residual']:+,}")
    if len(variants) == 4:
        delta = reports["mhsa_pe"]["total"] - reports["mhsa_nope"]["total"]
        ratio = reports["edgeattnet"]["total"] / reports["unet"]["total"]
        print(f"\npositional-table delta (mhsa_pe - mhsa_nope): {delta:,}")
        print(f"edgeattnet / unet parameter ratio: {ratio:.4f}")
    if cfg["json_out"]:
        with open(cfg["json_out"], "w") as fh:
            json.dump(reports, fh, indent=2, sort_keys=True)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeattnet",
                                     description="Filament segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="run the disk preprocessing pipeline")
    p.add_argument("--input"), p.add_argument("--output")
    p.add_argument("--config")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic filament dataset")
    p.add_argument("--output"), p.add_argument("--count", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--contrast", type=float)
    p.add_argument("--filaments"), p.add_argument("--barbs")
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant end to end")
    p.add_argument("--data"), p.add_argument("--output")
    p.add_argument("--variant", choices=sorted(CLI_VARIANTS))
    p.add_argument("--epochs", type=int), p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int), p.add_argument("--seed", type=int)
    p.add_argument("--input-size", dest="input_size")
    p.add_argument("--threshold", type=float), p.add_argument("--scales")
    p.add_argument("--train-count", dest="train_count", type=int)
    p.add_argument("--val-count", dest="val_count", type=int)
    p.add_argument("--test-count", dest="test_count", type=int)
    p.add_argument("--encoder-channels", dest="encoder_channels")
    p.add_argument("--heads", type=int)
    p.add_argument("--head-dim", dest="head_dim", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write binary masks for a trained model")
    p.add_argument("--checkpoint"), p.add_argument("--input"), p.add_argument("--output")
    p.add_argument("--threshold", type=float)
    p.add_argument("--overlay", action="store_const", const=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--predictions"), p.add_argument("--ground-truth", dest="ground_truth")
    p.add_argument("--output"), p.add_argument("--scales")
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-area", dest="min_area", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("params", help="parameter counts and per-layer breakdown")
    p.add_argument("--variant", default=None)
    p.add_argument("--input-size", dest="input_size")
    p.add_argument("--json-out", dest="json_out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"{args.command}: unexpected failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
