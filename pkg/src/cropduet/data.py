"""Synthetic data pipeline: template compositing, IoU-labeled crop sampling,
train-time augmentation, and the on-disk dataset formats.

Determinism contract: every random decision is drawn from a generator keyed on
(run seed, stream name, index), so datasets are pure functions of their seed
and any parallel generation schedule produces the sequential result.
"""

import csv
import hashlib
import json
import logging
import os
import zlib
from dataclasses import dataclass

import numpy as np

from .boxes import BBox, iou
from .errors import ConfigurationError, ContractError, DataError, SamplingExhaustedError
from .imgio import read_image, resize_bilinear, resize_bilinear_u8

log = logging.getLogger(__name__)

LABELS_CSV = "labels.csv"
MANIFEST_JSON = "manifest.json"
GT_CSV = "gt.csv"


def stream_rng(seed, name, index=0):
    """Independent generator for one (seed, stream, index) triple."""
    entropy = (int(seed), zlib.crc32(name.encode("utf-8")), int(index))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def epoch_order(seed, epoch, n):
    """Deterministic shuffle of range(n) for one epoch."""
    return stream_rng(seed, "epoch-order", epoch).permutation(n)


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Placement:
    """Where a template lands on a background: top-left corner, target size
    in pixels, and whether to mirror it first."""

    x: int
    y: int
    width: int
    height: int
    flip: bool = False

    def bbox(self):
        return BBox(self.x, self.y, self.x + self.width - 1, self.y + self.height - 1)


def compose(background, template, placement: Placement):
    """Alpha-blend a resized template onto a copy of the background.

    Returns (canvas, visible object box).  The placement may extend past the
    canvas; the returned box is clipped to it.  Pixels outside the placement
    are untouched.
    """
    if placement.width < 1 or placement.height < 1:
        raise ContractError("zero-area placement")
    bh, bw = background.shape[:2]
    x0, y0 = placement.x, placement.y
    x1, y1 = x0 + placement.width, y0 + placement.height
    if x1 <= 0 or y1 <= 0 or x0 >= bw or y0 >= bh:
        raise ContractError("placement does not intersect the background")

    tpl = template[:, ::-1] if placement.flip else template
    resized = resize_bilinear(tpl, placement.height, placement.width)

    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, bw), min(y1, bh)
    canvas = background.copy()
    patch = resized[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0]
    alpha = patch[:, :, 3:4] / 255.0
    region = canvas[cy0:cy1, cx0:cx1].astype(np.float64)
    blended = region * (1.0 - alpha) + patch[:, :, :3] * alpha
    canvas[cy0:cy1, cx0:cx1] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)

    visible = placement.bbox().clipped(bw, bh)
    return canvas, visible


def sample_placement(rng, bg_w, bg_h, scale_range=(0.1, 0.9), min_visible=0.6,
                     aspect_jitter=0.2):
    """Random location and size for a template paste.

    Scale is log-uniform over the given fraction of the shorter background
    side; position is uniform subject to keeping at least `min_visible` of
    each axis on the canvas.
    """
    short = min(bg_w, bg_h)
    lo, hi = scale_range
    size = float(np.exp(rng.uniform(np.log(lo * short), np.log(hi * short))))
    aspect = float(np.exp(rng.uniform(-aspect_jitter, aspect_jitter)))
    w = max(2, int(round(size * aspect)))
    h = max(2, int(round(size / aspect)))
    slack_x = int((1.0 - min_visible) * w)
    slack_y = int((1.0 - min_visible) * h)

    def pick(lo, hi):
        return int(rng.integers(lo, hi + 1)) if hi >= lo else (lo + hi) // 2

    x = pick(-slack_x, bg_w - w + slack_x)
    y = pick(-slack_y, bg_h - h + slack_y)
    return Placement(x, y, w, h, flip=bool(rng.integers(2)))


# ---------------------------------------------------------------------------
# Crop-window sampling
# ---------------------------------------------------------------------------

def _stratum_hit(value, lo, hi):
    if lo == hi:
        return value == lo
    if hi >= 1.0:
        return lo <= value <= 1.0
    return lo <= value < hi


def sample_crop(canvas_w, canvas_h, object_bbox: BBox, rng, label_stratum,
                max_attempts=1000):
    """Rejection-sample an integer crop window whose IoU with the object box
    falls in `label_stratum`.

    Strata are half-open [lo, hi) except when hi == 1 (closed) or lo == hi
    (exact value).  Raises SamplingExhaustedError when the stratum cannot be
    hit within max_attempts; callers retry with a fresh composite.
    """
    lo, hi = label_stratum
    if not (0.0 <= lo <= hi <= 1.0):
        raise ContractError(f"invalid stratum {label_stratum}")
    ob = object_bbox
    if ob.x0 < 0 or ob.y0 < 0 or ob.x1 > canvas_w - 1 or ob.y1 > canvas_h - 1:
        raise ContractError("object box outside the canvas")

    if lo >= 1.0:
        return BBox(ob.x0, ob.y0, ob.x1, ob.y1)

    ow = ob.x1 - ob.x0 + 1
    oh = ob.y1 - ob.y0 + 1
    cx = (ob.x0 + ob.x1) / 2.0
    cy = (ob.y0 + ob.y1) / 2.0

    for attempt in range(max_attempts):
        if hi <= 0.0 or attempt % 5 == 4:
            # fully random window; the workhorse for low strata
            w = int(rng.integers(2, canvas_w + 1))
            h = int(rng.integers(2, canvas_h + 1))
            x0 = int(rng.integers(0, canvas_w - w + 1))
            y0 = int(rng.integers(0, canvas_h - h + 1))
        else:
            # jitter the object box; slack shrinks as the target IoU grows
            target = rng.uniform(lo, min(hi, 1.0))
            slack = (1.0 - target) / max(target, 0.05)
            w = int(round(ow * np.exp(rng.uniform(-slack, slack) * 0.7)))
            h = int(round(oh * np.exp(rng.uniform(-slack, slack) * 0.7)))
            w = min(max(w, 2), canvas_w)
            h = min(max(h, 2), canvas_h)
            x0 = int(round(cx - w / 2.0 + rng.uniform(-1, 1) * slack * ow))
            y0 = int(round(cy - h / 2.0 + rng.uniform(-1, 1) * slack * oh))
            x0 = min(max(x0, 0), canvas_w - w)
            y0 = min(max(y0, 0), canvas_h - h)
        window = BBox(x0, y0, x0 + w - 1, y0 + h - 1)
        if _stratum_hit(iou(window, ob), lo, hi):
            return window
    raise SamplingExhaustedError(
        f"no window with IoU in [{lo}, {hi}] after {max_attempts} attempts")


# ---------------------------------------------------------------------------
# Assessor dataset
# ---------------------------------------------------------------------------

@dataclass
class AssessorSample:
    patch: np.ndarray        # (H_a, W_a, 3) uint8
    label: float             # IoU of window and object box, in [0, 1]
    window: BBox
    object_bbox: BBox


def stratum_bounds(index, n_strata):
    return index / n_strata, (index + 1) / n_strata


def generate_assessor_dataset(templates, backgrounds, count, seed,
                              patch_size=(24, 24), n_strata=10,
                              scale_range=(0.1, 0.9), work_size=None,
                              max_composite_retries=25):
    """Generate `count` IoU-labeled crops, stratified over `n_strata` equal
    label bins (bin of sample i is i mod n_strata, so counts are exact).

    With `work_size` set, each composite is first resized to (H, W) and
    windows are sampled in that space: crops then carry the same resampling
    signature as crops taken from a network input of that size.
    """
    if not templates or not backgrounds:
        raise ConfigurationError("need at least one template and one background")
    ph, pw = patch_size
    samples = []
    for i in range(count):
        samples.append(_generate_one_sample(
            templates, backgrounds, seed, i, i % n_strata, n_strata,
            (ph, pw), scale_range, work_size, max_composite_retries))
    return samples


def _to_work_space(canvas, obj, work_size):
    wh, ww = work_size
    bh, bw = canvas.shape[:2]
    scaled = resize_bilinear_u8(canvas, wh, ww)
    sx = (ww - 1.0) / (bw - 1.0)
    sy = (wh - 1.0) / (bh - 1.0)
    box = BBox(obj.x0 * sx, obj.y0 * sy, obj.x1 * sx, obj.y1 * sy)
    return scaled, box


def _generate_one_sample(templates, backgrounds, seed, index, stratum_idx,
                         n_strata, patch_size, scale_range, work_size, max_retries):
    rng = stream_rng(seed, "assessor-sample", index)
    bounds = stratum_bounds(stratum_idx, n_strata)
    for _ in range(max_retries):
        tpl = templates[int(rng.integers(len(templates)))]
        bg = backgrounds[int(rng.integers(len(backgrounds)))]
        placement = sample_placement(rng, bg.shape[1], bg.shape[0],
                                     scale_range=scale_range)
        canvas, obj = compose(bg, tpl, placement)
        if work_size is not None:
            canvas, obj = _to_work_space(canvas, obj, work_size)
        if obj.area <= 0:
            continue
        bh, bw = canvas.shape[:2]
        try:
            window = sample_crop(bw, bh, obj, rng, bounds)
        except SamplingExhaustedError:
            continue
        label = iou(window, obj)
        crop = canvas[int(window.y0):int(window.y1) + 1, int(window.x0):int(window.x1) + 1]
        patch = resize_bilinear_u8(crop, patch_size[0], patch_size[1])
        return AssessorSample(patch, label, window, obj)
    raise SamplingExhaustedError(
        f"sample {index}: stratum {bounds} unreachable after {max_retries} composites")


def write_assessor_dataset(samples, out_dir):
    """PNG patches + labels.csv + manifest.json (channel means, strata counts)."""
    from .imgio import write_image

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    mean_acc = np.zeros(3, dtype=np.float64)
    for i, s in enumerate(samples):
        name = f"{i:05d}.png"
        write_image(os.path.join(out_dir, name), s.patch)
        mean_acc += s.patch.reshape(-1, 3).mean(axis=0)
        rows.append([name, repr(s.label),
                     s.window.x0, s.window.y0, s.window.x1, s.window.y1,
                     s.object_bbox.x0, s.object_bbox.y0, s.object_bbox.x1, s.object_bbox.y1])
    with open(os.path.join(out_dir, LABELS_CSV), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label",
                         "window_x0", "window_y0", "window_x1", "window_y1",
                         "object_x0", "object_y0", "object_x1", "object_y1"])
        writer.writerows(rows)
    means = (mean_acc / max(len(samples), 1)) / 255.0
    # bin edges must use the same k/n arithmetic as stratum_bounds
    hist = np.histogram([s.label for s in samples], bins=np.arange(11) / 10.0)[0]
    manifest = {
        "count": len(samples),
        "patch_size": list(samples[0].patch.shape[:2]) if samples else None,
        "channel_means": [float(m) for m in means],
        "strata_counts": [int(c) for c in hist],
    }
    with open(os.path.join(out_dir, MANIFEST_JSON), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_assessor_dataset(directory):
    """Load patches and labels; returns (patches u8 array, labels array, manifest)."""
    labels_path = os.path.join(directory, LABELS_CSV)
    manifest_path = os.path.join(directory, MANIFEST_JSON)
    if not os.path.isfile(labels_path):
        raise DataError(f"missing {labels_path}")
    patches, labels = [], []
    with open(labels_path, newline="") as fh:
        for row in csv.DictReader(fh):
            label = float(row["label"])
            if not 0.0 <= label <= 1.0:
                raise DataError(f"label out of range in {labels_path}: {label}")
            patches.append(read_image(os.path.join(directory, row["filename"])))
            labels.append(label)
    if not patches:
        raise DataError(f"empty dataset in {directory}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    return np.stack(patches), np.asarray(labels, dtype=np.float64), manifest


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment_assessor(patch, rng):
    """Horizontal flip with probability 0.5; the IoU label is flip-invariant."""
    if rng.random() < 0.5:
        return patch[:, ::-1].copy()
    return patch


def augment_localizer(image, rng, out_size, p_augment=0.5, jitter=0.1, crop_pad=0.1):
    """Resize to the localizer input size, randomly perturbing half the images.

    The perturbation is a random combination of horizontal flip, per-channel
    brightness/contrast jitter (up to +-`jitter`), and a random crop or pad of
    up to `crop_pad` per side (edge-replicated).  Output values stay in
    [0, 255] and the output size is always `out_size`.
    """
    oh, ow = out_size
    if rng.random() >= p_augment:
        return resize_bilinear_u8(image, oh, ow)

    img = image
    if rng.random() < 0.5:
        img = img[:, ::-1]
    if rng.random() < 0.5:
        scale = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
        offset = rng.uniform(-jitter, jitter, size=3) * 255.0
        img = np.clip(img.astype(np.float64) * scale + offset, 0, 255).astype(np.uint8)
    if rng.random() < 0.5:
        h, w = img.shape[:2]
        deltas = [int(rng.uniform(0, crop_pad) * d) for d in (h, h, w, w)]
        if rng.random() < 0.5:  # crop
            top, bottom, left, right = deltas
            bottom = h - bottom
            right = w - right
            if bottom - top >= 2 and right - left >= 2:
                img = img[top:bottom, left:right]
        else:  # pad
            top, bottom, left, right = deltas
            img = np.pad(img, ((top, bottom), (left, right), (0, 0)), mode="edge")
    return resize_bilinear_u8(img, oh, ow)


# ---------------------------------------------------------------------------
# Localizer corpus and ground truth
# ---------------------------------------------------------------------------

def load_localizer_corpus(directory):
    """Load every readable PNG in lexicographic order; skip and count failures."""
    if not os.path.isdir(directory):
        raise ConfigurationError(f"not a directory: {directory}")
    images, skipped = [], 0
    names = []
    for name in sorted(os.listdir(directory)):
        if not name.lower().endswith(".png"):
            continue
        try:
            images.append(read_image(os.path.join(directory, name)))
            names.append(name)
        except DataError as exc:
            skipped += 1
            log.warning("skipping %s", exc)
    return images, names, skipped


def write_gt_csv(path, rows):
    """rows: iterable of (filename, BBox)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "x0", "y0", "x1", "y1"])
        for name, box in rows:
            writer.writerow([name, box.x0, box.y0, box.x1, box.y1])


def read_gt_csv(path):
    if not os.path.isfile(path):
        raise DataError(f"missing ground truth file {path}")
    gt = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            gt[row["filename"]] = BBox(float(row["x0"]), float(row["y0"]),
                                       float(row["x1"]), float(row["y1"]))
    if not gt:
        raise DataError(f"no rows in {path}")
    return gt


def dataset_digest(directory):
    """Order-independent content hash of a dataset directory (PNG + CSV files)."""
    digest = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        if name.endswith((".png", ".csv", ".json")):
            digest.update(name.encode())
            with open(os.path.join(directory, name), "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()
