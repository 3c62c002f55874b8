"""Bundled "square-on-noise" generator: warm-colored textured squares as
templates, cool noise/gradient rasters as backgrounds.  Used by the end-to-end
tests and as a self-contained demo dataset.
"""

import os

import numpy as np

from . import data
from .data import Placement, compose, sample_placement, stream_rng
from .imgio import write_image


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array([c * 255.0 for c in rgb])


def make_templates(rng, count=8, size=32):
    """Opaque warm-hued squares: smooth shaded interior, dark border (RGBA).

    Smooth content matters: the crop gradient is the image-space derivative at
    the sample points, so edges must be structure, not per-pixel noise.
    """
    templates = []
    ramp = np.linspace(-1.0, 1.0, size)
    for _ in range(count):
        hue = float(rng.uniform(-0.07, 0.13)) % 1.0  # reds through yellows
        base = _hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.8, 1.0))
        # gentle diagonal shading across the face
        gx, gy = rng.uniform(-0.25, 0.25, 2)
        shade = 1.0 + gx * ramp[None, :, None] + gy * ramp[:, None, None]
        rgb = base[None, None, :] * shade
        border = max(3, size // 8)
        dark = base * rng.uniform(0.15, 0.35)
        rgb[:border] = dark
        rgb[-border:] = dark
        rgb[:, :border] = dark
        rgb[:, -border:] = dark
        rgb = np.clip(rgb, 0, 255).astype(np.uint8)
        alpha = np.full((size, size, 1), 255, dtype=np.uint8)
        templates.append(np.concatenate([rgb, alpha], axis=2))
    return templates


def _smooth_noise(rng, h, w, cells, lo, hi):
    from .imgio import resize_bilinear

    coarse = rng.uniform(lo, hi, size=(cells, cells, 3))
    return resize_bilinear(coarse, h, w)


def make_backgrounds(rng, count=16, size=(96, 96)):
    """Cool-toned low-frequency rasters: smooth blobs, gradients, flat tints."""
    h, w = size
    backgrounds = []
    for i in range(count):
        kind = i % 3
        if kind == 0:
            base = rng.uniform(60, 180)
            img = np.repeat(_smooth_noise(rng, h, w, 5, -40, 40)[:, :, :1], 3, axis=2) + base
        elif kind == 1:
            c0 = _hsv_to_rgb(float(rng.uniform(0.35, 0.7)), rng.uniform(0.1, 0.4), rng.uniform(0.4, 0.9))
            c1 = _hsv_to_rgb(float(rng.uniform(0.35, 0.7)), rng.uniform(0.1, 0.4), rng.uniform(0.4, 0.9))
            axis = rng.integers(2)
            ramp = np.linspace(0.0, 1.0, h if axis == 0 else w)
            ramp = ramp[:, None, None] if axis == 0 else ramp[None, :, None]
            img = c0[None, None, :] * (1 - ramp) + c1[None, None, :] * ramp
            img = img + _smooth_noise(rng, h, w, 7, -15, 15)
        else:
            tint = _hsv_to_rgb(float(rng.uniform(0.4, 0.65)), rng.uniform(0.15, 0.45), rng.uniform(0.35, 0.8))
            img = tint[None, None, :] + _smooth_noise(rng, h, w, 6, -30, 30)
        backgrounds.append(np.clip(img, 0, 255).astype(np.uint8))
    return backgrounds


def _scene(rng, templates, backgrounds, scale_range, min_visible=1.0):
    tpl = templates[int(rng.integers(len(templates)))]
    bg = backgrounds[int(rng.integers(len(backgrounds)))]
    bh, bw = bg.shape[:2]
    placement = sample_placement(rng, bw, bh, scale_range=scale_range,
                                 min_visible=min_visible)
    return compose(bg, tpl, placement)


def _noise_frame(rng, templates, backgrounds, scale_range):
    """Object-free background or a frame with a mostly off-canvas object."""
    bg = backgrounds[int(rng.integers(len(backgrounds)))]
    if rng.random() < 0.5:
        return bg.copy()
    tpl = templates[int(rng.integers(len(templates)))]
    bh, bw = bg.shape[:2]
    short = min(bw, bh)
    size = int(rng.uniform(scale_range[0], scale_range[1]) * short)
    size = max(size, 4)
    # push 55-85% of the object past a random edge
    off = int(size * rng.uniform(0.55, 0.85))
    edge = int(rng.integers(4))
    x = int(rng.integers(0, max(bw - size, 1)))
    y = int(rng.integers(0, max(bh - size, 1)))
    if edge == 0:
        x = -off
    elif edge == 1:
        x = bw - size + off
    elif edge == 2:
        y = -off
    else:
        y = bh - size + off
    canvas, _ = compose(bg, tpl, Placement(x, y, size, size, flip=bool(rng.integers(2))))
    return canvas


def build_datasets(out_dir, seed, assessor_count=2000, train_count=1000,
                   test_count=200, canvas=(96, 96), patch_size=(24, 24),
                   template_count=8, background_count=16,
                   scene_scale_range=(0.25, 0.6), assessor_scale_range=(0.1, 0.9),
                   noisy_fraction=0.0, work_size=None, threads=1):
    """Emit the full toy dataset bundle under out_dir.

    Layout: assessor/ (patches + labels.csv + manifest.json),
    localizer_train/ (frames + gt.csv), test/ (frames + gt.csv).
    With noisy_fraction > 0 that share of training frames is replaced by
    object-free or partial-object frames (no ground truth rows for them).
    """
    rng = stream_rng(seed, "toy-assets")
    templates = make_templates(rng, template_count)
    backgrounds = make_backgrounds(rng, background_count, canvas)

    samples = _generate_samples_parallel(
        templates, backgrounds, assessor_count, seed, patch_size,
        assessor_scale_range, work_size, threads)
    manifest = data.write_assessor_dataset(samples, os.path.join(out_dir, "assessor"))

    for split, count, tag in (("localizer_train", train_count, "train"),
                              ("test", test_count, "test")):
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        gt_rows = []
        n_noisy = int(round(count * noisy_fraction)) if tag == "train" else 0
        for i in range(count):
            srng = stream_rng(seed, f"toy-{tag}", i)
            name = f"{i:05d}.png"
            if i < n_noisy:
                frame = _noise_frame(srng, templates, backgrounds, scene_scale_range)
            else:
                frame, box = _scene(srng, templates, backgrounds, scene_scale_range)
                gt_rows.append((name, box))
            write_image(os.path.join(split_dir, name), frame)
        data.write_gt_csv(os.path.join(split_dir, data.GT_CSV), gt_rows)
    return manifest


def _generate_samples_parallel(templates, backgrounds, count, seed, patch_size,
                               scale_range, work_size, threads):
    from concurrent.futures import ThreadPoolExecutor

    def one(i):
        return data._generate_one_sample(templates, backgrounds, seed, i, i % 10,
                                         10, patch_size, scale_range, work_size, 25)

    if threads <= 1:
        return [one(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(count)))
