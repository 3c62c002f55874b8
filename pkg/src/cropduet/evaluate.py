"""Detection inference and average-precision evaluation.

AP follows the all-points interpolation: detections ranked by descending
score, a detection is a true positive when its IoU with the (still unmatched)
ground-truth box of its image reaches the threshold, and the area under the
precision envelope over recall is integrated exactly.
"""

from dataclasses import dataclass

import numpy as np

from .boxes import BBox, iou
from .errors import ContractError
from .stn import (AffineParams, SamplingGrid, bilinear_sample, generate_grid,
                  grid_to_bbox)
from .tensor import Tensor
from .train import TrainConfig, normalize_batch


@dataclass
class Detection:
    image_id: str
    box: BBox
    score: float


def detect_batch(images_u8, localizer, assessor, cfg: TrainConfig):
    """Detect on a list of images (any sizes); returns [(BBox, score)].

    Each image is resized to the localizer input; the predicted grid is in
    normalized coordinates, so the box is mapped straight back to the original
    raster.  Batch-norm layers run on their stored running statistics.
    """
    from .imgio import resize_bilinear

    ih, iw = cfg.localizer_input
    batch = np.stack([
        np.clip(np.rint(resize_bilinear(img, ih, iw)), 0, 255).astype(np.uint8)
        for img in images_u8
    ])
    x = Tensor(normalize_batch(batch, cfg.channel_means))
    theta = localizer.forward(x, mode="infer")
    params = AffineParams.from_head(theta)
    grid = generate_grid(params, cfg.assessor_input[0], cfg.assessor_input[1])
    crop = bilinear_sample(x, grid)
    scores = assessor.forward(crop, mode="infer").data.reshape(-1)
    results = []
    for i, img in enumerate(images_u8):
        h, w = img.shape[:2]
        sub = SamplingGrid(Tensor(grid.us.data[i:i + 1]), Tensor(grid.vs.data[i:i + 1]))
        box = grid_to_bbox(sub, w, h)[0]
        results.append((box, float(scores[i])))
    return results


def detect(image_u8, localizer, assessor, cfg: TrainConfig):
    """Single-image convenience wrapper around detect_batch."""
    return detect_batch([image_u8], localizer, assessor, cfg)[0]


def average_precision(detections, groundtruth, iou_threshold=0.5):
    """VOC-2012 style AP for single-box-per-image ground truth.

    `groundtruth` maps image id -> BBox; every detection's image id must be
    present.  Returns 0.0 when there are no detections.
    """
    if not groundtruth:
        raise ContractError("empty ground truth")
    for det in detections:
        if det.image_id not in groundtruth:
            raise ContractError(f"detection for unknown image {det.image_id}")
    if not detections:
        return 0.0

    order = np.argsort([-d.score for d in detections], kind="stable")
    matched = set()
    tp = np.zeros(len(detections))
    fp = np.zeros(len(detections))
    for rank, idx in enumerate(order):
        det = detections[int(idx)]
        gt_box = groundtruth[det.image_id]
        if det.image_id not in matched and iou(det.box, gt_box) >= iou_threshold:
            matched.add(det.image_id)
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / len(groundtruth)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)

    # precision envelope, then integrate over recall steps
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_iou(detections, groundtruth):
    """Mean per-image IoU; ground-truth images without a detection count 0."""
    if not groundtruth:
        raise ContractError("empty ground truth")
    best = {}
    for det in detections:
        if det.image_id not in groundtruth:
            raise ContractError(f"detection for unknown image {det.image_id}")
        v = iou(det.box, groundtruth[det.image_id])
        best[det.image_id] = max(v, best.get(det.image_id, 0.0))
    return sum(best.get(name, 0.0) for name in groundtruth) / len(groundtruth)
