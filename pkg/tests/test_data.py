import os

import numpy as np
import pytest

from cropduet.boxes import BBox, iou
from cropduet.data import (Placement, augment_assessor, augment_localizer,
                           compose, epoch_order, generate_assessor_dataset,
                           load_localizer_corpus, read_assessor_dataset,
                           sample_crop, stream_rng, write_assessor_dataset)
from cropduet.errors import (ConfigurationError, ContractError,
                             SamplingExhaustedError)
from cropduet.imgio import write_image
from cropduet.toy import make_backgrounds, make_templates

from oracles import box_overlap, nearest_resize, pixel_count_iou


@pytest.fixture(scope="module")
def assets():
    rng = np.random.default_rng(77)
    return make_templates(rng, 4, size=24), make_backgrounds(rng, 4, (64, 64))


# ---------------------------------------------------------------------------
# iou
# ---------------------------------------------------------------------------

def test_iou_identical():
    a = BBox(3, 4, 10, 12)
    assert iou(a, a) == 1.0


def test_iou_disjoint():
    assert iou(BBox(0, 0, 2, 2), BBox(5, 5, 8, 8)) == 0.0


def test_iou_one_third():
    assert iou(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2)) == pytest.approx(1.0 / 3.0)


def test_iou_symmetric_bounded():
    rng = np.random.default_rng(30)
    for _ in range(200):
        ax = np.sort(rng.uniform(0, 50, 2))
        ay = np.sort(rng.uniform(0, 50, 2))
        bx = np.sort(rng.uniform(0, 50, 2))
        by = np.sort(rng.uniform(0, 50, 2))
        a = BBox(ax[0], ay[0], ax[1], ay[1])
        b = BBox(bx[0], by[0], bx[1], by[1])
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)
        assert v == pytest.approx(box_overlap((a.x0, a.y0, a.x1, a.y1),
                                              (b.x0, b.y0, b.x1, b.y1)), abs=1e-12)


def test_iou_matches_pixel_counting():
    rng = np.random.default_rng(31)
    for _ in range(500):
        ax = np.sort(rng.integers(0, 64, 2)); ay = np.sort(rng.integers(0, 64, 2))
        bx = np.sort(rng.integers(0, 64, 2)); by = np.sort(rng.integers(0, 64, 2))
        a = BBox(int(ax[0]), int(ay[0]), int(ax[1]), int(ay[1]))
        b = BBox(int(bx[0]), int(by[0]), int(bx[1]), int(by[1]))
        oracle = pixel_count_iou((a.x0, a.y0, a.x1, a.y1), (b.x0, b.y0, b.x1, b.y1))
        assert abs(iou(a, b) - oracle) < 1e-9


def test_iou_one_only_for_identical():
    a = BBox(0, 0, 10, 10)
    assert iou(a, BBox(0, 0, 10, 9.5)) < 1.0
    assert iou(a, BBox(0.5, 0, 10, 10)) < 1.0


def test_bbox_validation():
    with pytest.raises(ContractError):
        BBox(5, 0, 2, 3)
    with pytest.raises(ContractError):
        BBox(0, 0, np.inf, 3)


# ---------------------------------------------------------------------------
# compose
# ---------------------------------------------------------------------------

def test_compose_bbox_arithmetic(assets):
    templates, backgrounds = assets
    canvas, box = compose(backgrounds[0], templates[0], Placement(5, 7, 20, 12))
    assert (box.x0, box.y0, box.x1, box.y1) == (5, 7, 24, 18)
    assert canvas.shape == backgrounds[0].shape


def test_compose_zero_alpha_leaves_background(assets):
    _, backgrounds = assets
    ghost = np.zeros((8, 8, 4), dtype=np.uint8)
    ghost[:, :, :3] = 255
    canvas, _ = compose(backgrounds[1], ghost, Placement(10, 10, 8, 8))
    np.testing.assert_array_equal(canvas, backgrounds[1])


def test_compose_outside_untouched(assets):
    templates, backgrounds = assets
    placement = Placement(20, 30, 16, 10)
    canvas, box = compose(backgrounds[2], templates[1], placement)
    mask = np.ones(backgrounds[2].shape[:2], dtype=bool)
    mask[30:40, 20:36] = False
    np.testing.assert_array_equal(canvas[mask], backgrounds[2][mask])


def test_compose_identity_size_paste_exact(assets):
    # opaque template at its native size: pasted region equals the template
    templates, backgrounds = assets
    tpl = templates[2]
    h, w = tpl.shape[:2]
    canvas, _ = compose(backgrounds[3], tpl, Placement(4, 6, w, h))
    np.testing.assert_array_equal(canvas[6:6 + h, 4:4 + w], tpl[:, :, :3])


def test_compose_resized_matches_nearest_reference():
    # smooth gradient template: bilinear and nearest references agree closely
    # (ramp step under 4/255 keeps their difference within the budget)
    ramp = np.linspace(40, 96, 16)
    rgb = np.repeat(np.tile(ramp, (16, 1))[:, :, None], 3, axis=2)
    tpl = np.concatenate([rgb, np.full((16, 16, 1), 255.0)], axis=2).astype(np.uint8)
    bg = np.full((80, 80, 3), 10, dtype=np.uint8)
    canvas, _ = compose(bg, tpl, Placement(8, 8, 32, 32))
    ref = nearest_resize(tpl[:, :, :3], 32, 32)
    diff = np.abs(canvas[8:40, 8:40].astype(int) - ref.astype(int))
    assert diff.max() <= np.ceil(255 * 2 / 255)


def test_compose_partial_off_canvas(assets):
    templates, backgrounds = assets
    canvas, box = compose(backgrounds[0], templates[0], Placement(-6, -4, 16, 16))
    assert (box.x0, box.y0) == (0, 0)
    assert (box.x1, box.y1) == (9, 11)
    assert canvas.shape == backgrounds[0].shape


def test_compose_rejects_zero_area(assets):
    templates, backgrounds = assets
    with pytest.raises(ContractError):
        compose(backgrounds[0], templates[0], Placement(5, 5, 0, 10))


def test_compose_rejects_disjoint(assets):
    templates, backgrounds = assets
    with pytest.raises(ContractError):
        compose(backgrounds[0], templates[0], Placement(200, 200, 10, 10))


def test_compose_flip(assets):
    templates, backgrounds = assets
    tpl = templates[3]
    h, w = tpl.shape[:2]
    flipped, _ = compose(backgrounds[0], tpl, Placement(0, 0, w, h, flip=True))
    np.testing.assert_array_equal(flipped[:h, :w], tpl[:, ::-1, :3])


# ---------------------------------------------------------------------------
# crop sampling
# ---------------------------------------------------------------------------

def test_sample_crop_exact_one():
    rng = stream_rng(1, "t")
    obj = BBox(10, 12, 30, 28)
    win = sample_crop(64, 64, obj, rng, (1.0, 1.0))
    assert (win.x0, win.y0, win.x1, win.y1) == (10, 12, 30, 28)


def test_sample_crop_exact_zero():
    rng = stream_rng(2, "t")
    obj = BBox(10, 10, 20, 20)
    for _ in range(20):
        win = sample_crop(64, 64, obj, rng, (0.0, 0.0))
        assert iou(win, obj) == 0.0


def test_sample_crop_mid_stratum_self_check():
    rng = stream_rng(3, "t")
    obj = BBox(16, 20, 40, 44)
    for _ in range(30):
        win = sample_crop(64, 64, obj, rng, (0.4, 0.6))
        assert 0.4 <= iou(win, obj) < 0.6
        assert 0 <= win.x0 <= win.x1 <= 63 and 0 <= win.y0 <= win.y1 <= 63


def test_sample_crop_all_strata_reachable():
    rng = stream_rng(4, "t")
    obj = BBox(20, 20, 44, 44)
    for k in range(10):
        win = sample_crop(64, 64, obj, rng, (k / 10, (k + 1) / 10))
        v = iou(win, obj)
        assert k / 10 <= v < (k + 1) / 10 or (k == 9 and v == 1.0)


def test_sample_crop_exhaustion():
    rng = stream_rng(5, "t")
    # an object covering the full canvas cannot be disjoint from any window
    obj = BBox(0, 0, 63, 63)
    with pytest.raises(SamplingExhaustedError):
        sample_crop(64, 64, obj, rng, (0.0, 0.0), max_attempts=50)


def test_sample_crop_object_outside_canvas_rejected():
    with pytest.raises(ContractError):
        sample_crop(32, 32, BBox(0, 0, 40, 10), stream_rng(6, "t"), (0.5, 0.6))


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def test_generate_assessor_dataset(assets, tmp_path):
    templates, backgrounds = assets
    samples = generate_assessor_dataset(templates, backgrounds, 60, seed=9,
                                        patch_size=(16, 16))
    assert len(samples) == 60
    for s in samples:
        assert s.patch.shape == (16, 16, 3)
        assert 0.0 <= s.label <= 1.0
        assert s.label == iou(s.window, s.object_bbox)  # label provenance

    # exact stratification: 6 per bin for 60 samples over 10 bins
    manifest = write_assessor_dataset(samples, tmp_path / "ds")
    assert manifest["strata_counts"] == [6] * 10

    patches, labels, man2 = read_assessor_dataset(tmp_path / "ds")
    assert patches.shape == (60, 16, 16, 3)
    np.testing.assert_array_equal(labels, [s.label for s in samples])
    assert man2["channel_means"] == manifest["channel_means"]


def test_generate_deterministic(assets):
    templates, backgrounds = assets
    a = generate_assessor_dataset(templates, backgrounds, 30, seed=4, patch_size=(12, 12))
    b = generate_assessor_dataset(templates, backgrounds, 30, seed=4, patch_size=(12, 12))
    for s, t in zip(a, b):
        assert s.label == t.label
        np.testing.assert_array_equal(s.patch, t.patch)


def test_generate_requires_inputs():
    with pytest.raises(ConfigurationError):
        generate_assessor_dataset([], [], 10, seed=0)


def test_labels_csv_roundtrip_exact(assets, tmp_path):
    templates, backgrounds = assets
    samples = generate_assessor_dataset(templates, backgrounds, 20, seed=5,
                                        patch_size=(12, 12))
    write_assessor_dataset(samples, tmp_path / "ds")
    _, labels, _ = read_assessor_dataset(tmp_path / "ds")
    # repr round trip keeps the exact float
    for s, lab in zip(samples, labels):
        assert s.label == lab


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def test_augment_assessor_involution():
    rng = np.random.default_rng(40)
    patch = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
    flipped = patch[:, ::-1]
    np.testing.assert_array_equal(flipped[:, ::-1], patch)


def test_augment_assessor_flip_rate():
    patch = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    flips = 0
    for i in range(10000):
        out = augment_assessor(patch, stream_rng(7, "flip", i))
        if not np.array_equal(out, patch):
            flips += 1
    assert 0.47 <= flips / 10000 <= 0.53  # binomial 3-sigma bound


def test_augment_localizer_contracts():
    rng0 = np.random.default_rng(41)
    img = rng0.integers(0, 256, (50, 70, 3)).astype(np.uint8)
    for i in range(50):
        out = augment_localizer(img, stream_rng(8, "aug", i), (32, 32))
        assert out.shape == (32, 32, 3)
        assert out.dtype == np.uint8  # implies values stay in [0, 255]


def test_augment_localizer_no_jitter_is_resize():
    rng0 = np.random.default_rng(42)
    img = rng0.integers(0, 256, (40, 40, 3)).astype(np.uint8)
    from cropduet.imgio import resize_bilinear_u8

    out = augment_localizer(img, stream_rng(9, "aug", 0), (40, 40),
                            p_augment=0.0)
    np.testing.assert_array_equal(out, resize_bilinear_u8(img, 40, 40))
    np.testing.assert_array_equal(out, img)  # same-size resize is identity


# ---------------------------------------------------------------------------
# corpus loading
# ---------------------------------------------------------------------------

def test_corpus_roundtrip(tmp_path):
    rng = np.random.default_rng(43)
    for i in range(5):
        write_image(tmp_path / f"{i:03d}.png",
                    rng.integers(0, 256, (20, 20, 3)).astype(np.uint8))
    images, names, skipped = load_localizer_corpus(tmp_path)
    assert len(images) == 5 and skipped == 0
    assert names == sorted(names)


def test_corpus_skips_corrupt(tmp_path):
    rng = np.random.default_rng(44)
    for i in range(4):
        write_image(tmp_path / f"{i:03d}.png",
                    rng.integers(0, 256, (20, 20, 3)).astype(np.uint8))
    (tmp_path / "002.png").write_bytes(b"this is not a png")
    images, names, skipped = load_localizer_corpus(tmp_path)
    assert len(images) == 3 and skipped == 1
    assert "002.png" not in names


def test_epoch_order_deterministic():
    a = epoch_order(11, 3, 100)
    b = epoch_order(11, 3, 100)
    c = epoch_order(11, 4, 100)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert sorted(a) == list(range(100))
