"""Command-line entry point.

Subcommands: gen-data, train, eval, detect, overlay.  All state flows through
the JSON config plus flags; exit codes are 0 (success), 1 (configuration
error), 2 (data error), 3 (runtime/checkpoint error).
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import data as D
from . import toy
from .config import load_config
from .errors import (CheckpointError, ConfigurationError, ContractError,
                     CropDuetError, DataError)
from .evaluate import Detection, average_precision, detect_batch, mean_iou
from .train import joint_train, load_checkpoint

log = logging.getLogger("cropduet")


def _write_report(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_report.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def cmd_gen_data(cfg, threads):
    t0 = time.monotonic()
    data_dir = cfg.data_dir
    d = cfg.data
    if d["generator"] == "toy":
        manifest = toy.build_datasets(
            data_dir, cfg.seed,
            assessor_count=d["assessor_count"],
            train_count=d["localizer_train_count"],
            test_count=d["test_count"],
            canvas=tuple(d["canvas_size"]),
            patch_size=tuple(d["patch_size"]),
            template_count=d["template_count"],
            background_count=d["background_count"],
            scene_scale_range=tuple(d["scene_scale_range"]),
            assessor_scale_range=tuple(d["assessor_scale_range"]),
            noisy_fraction=d["noisy_fraction"],
            work_size=tuple(d["work_size"] or cfg.train["localizer_input"]),
            threads=threads,
        )
    else:
        templates = _load_dir(d["template_dir"], mode="RGBA")
        backgrounds = _load_dir(d["background_dir"], mode="RGB")
        samples = D.generate_assessor_dataset(
            templates, backgrounds, d["assessor_count"], cfg.seed,
            patch_size=tuple(d["patch_size"]), n_strata=d["strata"],
            scale_range=tuple(d["assessor_scale_range"]),
            work_size=tuple(d["work_size"]) if d["work_size"] else None)
        manifest = D.write_assessor_dataset(samples, os.path.join(data_dir, "assessor"))
    hashes = {
        name: D.dataset_digest(os.path.join(data_dir, name))
        for name in sorted(os.listdir(data_dir))
        if os.path.isdir(os.path.join(data_dir, name))
    }
    _write_report(cfg.out_dir, {
        "command": "gen-data",
        "seed": cfg.seed,
        "dataset_hashes": hashes,
        "channel_means": manifest["channel_means"],
        "strata_counts": manifest.get("strata_counts"),
        "wall_time_s": round(time.monotonic() - t0, 3),
    })
    print(f"datasets written under {data_dir}")
    return 0


def _load_dir(directory, mode):
    if not directory or not os.path.isdir(directory):
        raise ConfigurationError(f"missing input directory: {directory}")
    from .imgio import read_image

    images = []
    for name in sorted(os.listdir(directory)):
        if name.lower().endswith(".png"):
            images.append(read_image(os.path.join(directory, name), mode=mode))
    if not images:
        raise ConfigurationError(f"no PNG files in {directory}")
    return images


def cmd_train(cfg, args):
    t0 = time.monotonic()
    data_dir = cfg.data_dir
    patches, labels, manifest = D.read_assessor_dataset(os.path.join(data_dir, "assessor"))
    images, _, skipped = D.load_localizer_corpus(os.path.join(data_dir, "localizer_train"))
    if not images:
        raise DataError(f"no training images under {data_dir}/localizer_train")
    tc = cfg.train_config(channel_means=manifest["channel_means"],
                          epochs=args.epochs)
    if args.verify_grad:
        print("running 64-bit gradient spot checks...")
        from .gradcheck import verify_gradients
        if not verify_gradients(seed=cfg.seed):
            raise ContractError("gradient verification failed")

    def progress(step, epoch, a_loss, l_loss, score, area):
        if step % 50 == 0 or step == 1:
            print(f"step {step:6d} epoch {epoch:3d}  assessor {a_loss:.4f}  "
                  f"localizer {l_loss:.4f}  score {score:.3f}  area {area:.3f}")

    manifest_path, *_ = joint_train(
        tc, patches, labels, images, cfg.out_dir,
        resume=args.resume, log_fn=progress)
    with open(os.path.join(cfg.out_dir, "metrics.csv")) as fh:
        last = fh.read().strip().splitlines()[-1].split(",")
    final_losses = {"assessor": float(last[2]), "localizer": float(last[3])} \
        if last[0] != "step" else {}
    _write_report(cfg.out_dir, {
        "command": "train",
        "seed": tc.seed,
        "config_hash": tc.config_hash(),
        "dataset_hashes": {"assessor": D.dataset_digest(os.path.join(data_dir, "assessor"))},
        "final_losses": final_losses,
        "skipped_files": skipped,
        "ap": None,
        "wall_time_s": round(time.monotonic() - t0, 3),
    })
    print(f"checkpoint at {manifest_path}")
    return 0


def _load_duet(cfg, checkpoint_dir):
    patches_manifest = os.path.join(cfg.data_dir, "assessor", D.MANIFEST_JSON)
    if os.path.isfile(patches_manifest):
        with open(patches_manifest) as fh:
            means = json.load(fh)["channel_means"]
    else:
        means = (0.0, 0.0, 0.0)
    tc = cfg.train_config(channel_means=means)
    loc, ass, _, _, manifest = load_checkpoint(checkpoint_dir, tc)
    return loc, ass, tc, manifest


def _run_detections(cfg, checkpoint_dir, image_dir):
    if not os.path.isdir(image_dir):
        raise DataError(f"missing image directory: {image_dir}")
    images, names, skipped = D.load_localizer_corpus(image_dir)
    if not images:
        raise DataError(f"no readable images under {image_dir}")
    loc, ass, tc, _ = _load_duet(cfg, checkpoint_dir)
    detections = []
    chunk = 64
    for start in range(0, len(images), chunk):
        batch = images[start:start + chunk]
        for (box, score), name in zip(detect_batch(batch, loc, ass, tc),
                                      names[start:start + chunk]):
            detections.append(Detection(name, box, score))
    return detections, skipped


def _write_detections_csv(path, detections):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "x0", "y0", "x1", "y1", "score"])
        for det in detections:
            writer.writerow([det.image_id, repr(det.box.x0), repr(det.box.y0),
                             repr(det.box.x1), repr(det.box.y1), repr(det.score)])


def cmd_detect(cfg, args):
    image_dir = args.images or os.path.join(cfg.data_dir, "test")
    detections, skipped = _run_detections(cfg, args.checkpoint or cfg.out_dir, image_dir)
    out_csv = os.path.join(cfg.out_dir, "detections.csv")
    _write_detections_csv(out_csv, detections)
    print(f"{len(detections)} detections -> {out_csv} ({skipped} skipped)")
    return 0


def cmd_eval(cfg, args):
    t0 = time.monotonic()
    image_dir = args.images or os.path.join(cfg.data_dir, "test")
    gt_path = args.gt or os.path.join(image_dir, D.GT_CSV)
    gt = D.read_gt_csv(gt_path)
    detections, skipped = _run_detections(cfg, args.checkpoint or cfg.out_dir, image_dir)
    missing = [d.image_id for d in detections if d.image_id not in gt]
    if missing:
        raise DataError(f"images missing from ground truth: {missing[:10]}")
    out_csv = os.path.join(cfg.out_dir, "detections.csv")
    _write_detections_csv(out_csv, detections)
    ap = average_precision(detections, gt, cfg.eval["iou_threshold"])
    miou = mean_iou(detections, gt)
    report = {
        "ap": ap,
        "mean_iou": miou,
        "iou_threshold": cfg.eval["iou_threshold"],
        "num_images": len(gt),
        "per_image": [
            {"filename": det.image_id, "score": det.score,
             "box": [det.box.x0, det.box.y0, det.box.x1, det.box.y1]}
            for det in detections
        ],
    }
    with open(os.path.join(cfg.out_dir, "eval_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    _write_report(cfg.out_dir, {
        "command": "eval",
        "seed": cfg.seed,
        "ap": ap,
        "mean_iou": miou,
        "skipped_files": skipped,
        "wall_time_s": round(time.monotonic() - t0, 3),
    })
    print(f"AP@{cfg.eval['iou_threshold']}: {ap:.4f}  mean IoU: {miou:.4f}")
    return 0


def cmd_overlay(cfg, args):
    from PIL import Image, ImageDraw

    from .imgio import resize_bilinear_u8

    image_dir = args.images or os.path.join(cfg.data_dir, "test")
    out_dir = args.out_overlays or os.path.join(cfg.out_dir, "overlays")
    os.makedirs(out_dir, exist_ok=True)
    if not os.path.isdir(image_dir):
        raise DataError(f"missing image directory: {image_dir}")
    images, names, skipped = D.load_localizer_corpus(image_dir)
    if not images:
        raise DataError(f"no readable images under {image_dir}")
    loc, ass, tc, _ = _load_duet(cfg, args.checkpoint or cfg.out_dir)

    from .stn import AffineParams, bilinear_sample, generate_grid
    from .tensor import Tensor
    from .train import normalize_batch
    from .imgio import resize_bilinear

    count = 0
    for img, name in zip(images, names):
        h, w = img.shape[:2]
        (box, score) = detect_batch([img], loc, ass, tc)[0]
        # re-run the crop on the raw image for the side panel
        ih, iw = tc.localizer_input
        small = np.clip(np.rint(resize_bilinear(img, ih, iw)), 0, 255).astype(np.uint8)
        x = Tensor(normalize_batch(small[None], tc.channel_means))
        theta = loc.forward(x, mode="infer")
        grid = generate_grid(AffineParams.from_head(theta), *tc.assessor_input)
        raw = Tensor(np.ascontiguousarray(
            small[None].astype(np.float32).transpose(0, 3, 1, 2)))
        crop = bilinear_sample(raw, grid).data[0].transpose(1, 2, 0)
        panel = resize_bilinear_u8(np.clip(crop, 0, 255).astype(np.uint8), h, h)

        canvas = Image.new("RGB", (w + 4 + panel.shape[1], h), (30, 30, 30))
        annotated = Image.fromarray(img)
        draw = ImageDraw.Draw(annotated)
        draw.rectangle([box.x0, box.y0, box.x1, box.y1], outline=(0, 255, 0), width=2)
        draw.text((2, 2), f"{score:.3f}", fill=(0, 255, 0))
        canvas.paste(annotated, (0, 0))
        canvas.paste(Image.fromarray(panel), (w + 4, 0))
        canvas.save(os.path.join(out_dir, name), format="PNG")
        count += 1
    print(f"{count} overlays -> {out_dir} ({skipped} skipped)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cropduet",
        description="Weakly supervised single-object localization: a "
                    "differentiable-crop localizer trained by an IoU-regressing "
                    "assessor.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("gen-data", "generate the synthetic datasets"),
            ("train", "run joint training"),
            ("eval", "evaluate a checkpoint against ground truth"),
            ("detect", "write detections for an image directory"),
            ("overlay", "render detection overlays")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for data generation")
        if name == "train":
            p.add_argument("--epochs", type=int, default=None,
                           help="override train.epochs")
            p.add_argument("--resume", default=None,
                           help="directory containing checkpoint.json to resume from")
            p.add_argument("--verify-grad", action="store_true",
                           help="run 64-bit gradient checks before training")
        if name in ("eval", "detect", "overlay"):
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint directory (default: out dir)")
            p.add_argument("--images", default=None,
                           help="image directory (default: <data>/test)")
        if name == "eval":
            p.add_argument("--gt", default=None,
                           help="ground-truth CSV (default: <images>/gt.csv)")
        if name == "overlay":
            p.add_argument("--out-overlays", default=None,
                           help="overlay output directory")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config,
                          overrides={"seed": args.seed, "out_dir": args.out})
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.threads)
        if args.command == "train":
            return cmd_train(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "detect":
            return cmd_detect(cfg, args)
        if args.command == "overlay":
            return cmd_overlay(cfg, args)
        raise ConfigurationError(f"unknown command {args.command}")
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return 1
    except DataError as exc:
        log.error("data error: %s", exc)
        return 2
    except (CheckpointError, CropDuetError) as exc:
        log.error("runtime error: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
