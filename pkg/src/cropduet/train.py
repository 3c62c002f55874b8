"""Joint training of the crop-predicting localizer and the overlap-scoring
assessor.

Each iteration takes one supervised assessor step (mean squared error against
IoU labels) and then one localizer step whose loss is the assessor's score of
the localizer's crop pulled toward a constant target, plus the two grid
regularizers.  The localizer gradient flows through the assessor, but the
assessor's parameters, gradients, running statistics, and optimizer moments
are left bit-identical by the localizer update.
"""

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .data import augment_assessor, augment_localizer, epoch_order, stream_rng
from .errors import CheckpointError, ContractError, DataError
from .imgio import resize_bilinear
from .stn import (AffineParams, bilinear_sample, direction_penalty,
                  generate_grid, grid_to_bbox, outside_penalty)
from .tensor import Tape, Tensor

METRICS_HEADER = ("step,epoch,assessor_loss,localizer_loss,"
                  "mean_assessor_score_on_crops,mean_bbox_area_fraction,wall_time_s")


@dataclass
class ArchSpec:
    stem_channels: int = 16
    block_channels: tuple = (16, 32)
    block_strides: tuple = (1, 2)
    coord_channels: bool = False

    def as_dict(self):
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        d["block_strides"] = list(self.block_strides)
        return d


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    epochs: int = 300
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    localizer_input: tuple = (48, 48)     # (H, W)
    assessor_input: tuple = (24, 24)      # crop output (H_o, W_o)
    target_score: float = 1.0
    direction_weight: float = 1.0
    outside_weight: float = 1.0
    grad_clip: float | None = 5.0
    assessor_flip: bool = True
    localizer_augment: bool = True
    channel_means: tuple = (0.0, 0.0, 0.0)
    checkpoint_every: int = 0             # epochs; 0 = final only
    localizer_arch: ArchSpec = field(default_factory=lambda: ArchSpec(coord_channels=True))
    assessor_arch: ArchSpec = field(default_factory=lambda: ArchSpec(
        stem_channels=0, block_channels=(32, 32, 32, 32), block_strides=(2, 2, 1, 1)))

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not 0.0 <= self.target_score <= 1.0:
            raise ContractError("target_score must lie in [0, 1]")
        for dims in (self.localizer_input, self.assessor_input):
            if min(dims) < 2:
                raise ContractError("input sizes must be at least 2")

    def canonical(self):
        d = asdict(self)
        d["localizer_arch"] = self.localizer_arch.as_dict()
        d["assessor_arch"] = self.assessor_arch.as_dict()
        for key in ("localizer_input", "assessor_input", "channel_means"):
            d[key] = list(d[key])
        return d

    def config_hash(self):
        d = self.canonical()
        # stopping condition and logging cadence may change across a resume
        d.pop("epochs")
        d.pop("checkpoint_every")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class Adam:
    """Adam with bias correction; moments live per named parameter."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        """One update; parameters without a gradient this step are untouched."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != self.m[name].shape:
                raise ContractError(f"gradient shape mismatch for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps))
            p.data -= update.astype(p.dtype)


def clip_gradients(params, max_norm):
    """Scale all gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    grads = [p.grad for p in params.values() if p.grad is not None]
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads:
            g *= factor
    return norm


def build_networks(cfg: TrainConfig):
    loc = nn.LocalizerNet(stream_rng(cfg.seed, "init-localizer"),
                          stem_channels=cfg.localizer_arch.stem_channels,
                          block_channels=tuple(cfg.localizer_arch.block_channels),
                          block_strides=tuple(cfg.localizer_arch.block_strides),
                          coord_channels=cfg.localizer_arch.coord_channels)
    ass = nn.AssessorNet(stream_rng(cfg.seed, "init-assessor"),
                         block_channels=tuple(cfg.assessor_arch.block_channels),
                         block_strides=tuple(cfg.assessor_arch.block_strides))
    return loc, ass


def normalize_batch(images_u8, channel_means):
    """uint8 (N,H,W,3) -> float (N,3,H,W), scaled to [0,1] minus channel means."""
    x = np.asarray(images_u8, dtype=T.get_default_dtype()) / 255.0
    x -= np.asarray(channel_means, dtype=x.dtype)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def assessor_step(assessor, optimizer, patches_u8, labels, cfg: TrainConfig):
    """Supervised regression step on one batch of labeled crops."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise DataError("empty assessor batch")
    if labels.min() < 0.0 or labels.max() > 1.0:
        raise DataError("assessor labels must lie in [0, 1]")
    assessor.zero_grad()
    x = Tensor(normalize_batch(patches_u8, cfg.channel_means))
    y = Tensor(labels.astype(T.get_default_dtype()))
    with Tape() as tape:
        pred = assessor.forward(x, mode="train", update_stats=True)
        loss = T.mse_loss(T.reshape(pred, (-1,)), y)
    tape.backward(loss)
    optimizer.step()
    return float(loss.data)


def localizer_loss(localizer, assessor, x, cfg: TrainConfig):
    """Forward pass of the full crop-and-judge composite; returns the loss and
    the intermediate pieces.  The assessor normalizes with its running
    statistics (and never updates them here): batch statistics would couple
    the score of each crop to every other crop in the batch."""
    theta = localizer.forward(x, mode="train", update_stats=True)
    params = AffineParams.from_head(theta)
    grid = generate_grid(params, cfg.assessor_input[0], cfg.assessor_input[1])
    crop = bilinear_sample(x, grid)
    score = assessor.forward(crop, mode="infer", update_stats=False)
    flat = T.reshape(score, (-1,))
    target = Tensor(np.full(flat.shape, cfg.target_score, dtype=flat.dtype))
    loss = T.mse_loss(flat, target)
    if cfg.direction_weight:
        loss = T.add(loss, cfg.direction_weight * direction_penalty(params))
    if cfg.outside_weight:
        loss = T.add(loss, cfg.outside_weight * outside_penalty(grid))
    return loss, grid, flat


def localizer_step(localizer, assessor, optimizer, images_u8, cfg: TrainConfig):
    """One unsupervised localizer update; the assessor is frozen throughout."""
    localizer.zero_grad()
    x = Tensor(normalize_batch(images_u8, cfg.channel_means))
    with nn.frozen(assessor):
        with Tape() as tape:
            loss, grid, scores = localizer_loss(localizer, assessor, x, cfg)
        tape.backward(loss)
        if cfg.grad_clip:
            clip_gradients(localizer.named_params(), cfg.grad_clip)
        optimizer.step()
    h, w = cfg.localizer_input
    boxes = grid_to_bbox(grid, w, h)
    area_frac = float(np.mean([b.area / ((w - 1.0) * (h - 1.0)) for b in boxes]))
    return float(loss.data), boxes, float(scores.data.mean()), area_frac


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + one little-endian float32 blob
# ---------------------------------------------------------------------------

CHECKPOINT_MANIFEST = "checkpoint.json"
CHECKPOINT_BLOB = "checkpoint.bin"


def _checkpoint_tensors(loc, ass, adam_loc, adam_ass):
    tensors = {}
    for prefix, net in (("localizer", loc), ("assessor", ass)):
        for name, t in net.named_tensors().items():
            tensors[f"{prefix}/{name}"] = t.data
    for prefix, opt in (("adam_localizer", adam_loc), ("adam_assessor", adam_ass)):
        for name, arr in opt.m.items():
            tensors[f"{prefix}/m/{name}"] = arr
        for name, arr in opt.v.items():
            tensors[f"{prefix}/v/{name}"] = arr
    return tensors


def save_checkpoint(directory, loc, ass, adam_loc, adam_ass, cfg, step, epoch,
                    prefix="checkpoint"):
    """Atomic write of the manifest + blob pair."""
    os.makedirs(directory, exist_ok=True)
    tensors = _checkpoint_tensors(loc, ass, adam_loc, adam_ass)
    entries = []
    offset = 0
    blob_parts = []
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "size": len(raw)})
        blob_parts.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": 1,
        "seed": cfg.seed,
        "step": step,
        "epoch": epoch,
        "config_hash": cfg.config_hash(),
        "channel_means": list(cfg.channel_means),
        "adam_t": {"localizer": adam_loc.t, "assessor": adam_ass.t},
        "tensors": entries,
    }
    blob_path = os.path.join(directory, f"{prefix}.bin")
    manifest_path = os.path.join(directory, f"{prefix}.json")
    for path, payload in ((blob_path, b"".join(blob_parts)),
                          (manifest_path, json.dumps(manifest, indent=1, sort_keys=True).encode())):
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    return manifest_path


def load_checkpoint(directory, cfg, prefix="checkpoint"):
    """Rebuild both networks and optimizers from a saved state."""
    manifest_path = os.path.join(directory, f"{prefix}.json")
    blob_path = os.path.join(directory, f"{prefix}.bin")
    if not (os.path.isfile(manifest_path) and os.path.isfile(blob_path)):
        raise CheckpointError(f"no checkpoint at {directory}/{prefix}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("config_hash") != cfg.config_hash():
        raise CheckpointError("checkpoint config hash does not match the run config")
    with open(blob_path, "rb") as fh:
        blob = fh.read()

    loc, ass = build_networks(cfg)
    adam_loc = Adam(loc.named_params(), lr=cfg.learning_rate, beta1=cfg.adam_beta1,
                    beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    adam_ass = Adam(ass.named_params(), lr=cfg.learning_rate, beta1=cfg.adam_beta1,
                    beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    targets = _checkpoint_tensors(loc, ass, adam_loc, adam_ass)
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in targets:
            raise CheckpointError(f"unknown tensor {name} in checkpoint")
        arr = np.frombuffer(blob, dtype="<f4", count=entry["size"] // 4,
                            offset=entry["offset"]).reshape(entry["shape"])
        target = targets[name]
        if list(target.shape) != entry["shape"]:
            raise CheckpointError(f"shape mismatch for {name}")
        target[...] = arr.astype(target.dtype)
    adam_loc.t = manifest["adam_t"]["localizer"]
    adam_ass.t = manifest["adam_t"]["assessor"]
    return loc, ass, adam_loc, adam_ass, manifest


# ---------------------------------------------------------------------------
# Joint loop
# ---------------------------------------------------------------------------

class _AssessorStream:
    """Infinite shuffled stream over the assessor dataset, addressable by the
    global sample counter so that resume replays the identical order."""

    def __init__(self, patches, labels, seed):
        self.patches = patches
        self.labels = labels
        self.seed = seed
        self._cycle = None
        self._perm = None

    def batch(self, counter, size, flip):
        n = len(self.labels)
        idx_p, idx_l = [], []
        for j in range(size):
            s = counter + j
            cycle = s // n
            if cycle != self._cycle:
                self._cycle = cycle
                self._perm = stream_rng(self.seed, "assessor-order", cycle).permutation(n)
            k = int(self._perm[s % n])
            patch = self.patches[k]
            if flip:
                patch = augment_assessor(patch, stream_rng(self.seed, "assessor-aug", s))
            idx_p.append(patch)
            idx_l.append(self.labels[k])
        return np.stack(idx_p), np.asarray(idx_l)


def _localizer_batch(images, order, epoch, start, cfg):
    batch = []
    n = len(images)
    for j in range(cfg.batch_size):
        pos = start + j
        img = images[int(order[pos])]
        if cfg.localizer_augment:
            rng = stream_rng(cfg.seed, "localizer-aug", epoch * n + pos)
            batch.append(augment_localizer(img, rng, cfg.localizer_input))
        else:
            resized = resize_bilinear(img, *cfg.localizer_input)
            batch.append(np.clip(np.rint(resized), 0, 255).astype(np.uint8))
    return np.stack(batch)


def joint_train(cfg: TrainConfig, assessor_patches, assessor_labels,
                localizer_images, out_dir, resume=None, log_fn=None):
    """Run the interleaved loop and return the final checkpoint manifest path.

    Per iteration: one assessor step, then one localizer step that sees the
    assessor's pre-update parameters of the *next* iteration (i.e. the values
    just written by this iteration's assessor step).  Metrics are appended to
    out_dir/metrics.csv, one row per iteration.
    """
    if len(assessor_labels) == 0 or len(localizer_images) == 0:
        raise DataError("both datasets must be non-empty")
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")

    if resume:
        loc, ass, adam_loc, adam_ass, manifest = load_checkpoint(resume, cfg)
        start_epoch = manifest["epoch"]
        step = manifest["step"]
        mode = "a" if os.path.exists(metrics_path) else "w"
    else:
        loc, ass = build_networks(cfg)
        adam_loc = Adam(loc.named_params(), lr=cfg.learning_rate, beta1=cfg.adam_beta1,
                        beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        adam_ass = Adam(ass.named_params(), lr=cfg.learning_rate, beta1=cfg.adam_beta1,
                        beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        start_epoch = 0
        step = 0
        mode = "w"

    stream = _AssessorStream(assessor_patches, assessor_labels, cfg.seed)
    iters_per_epoch = max(len(localizer_images) // cfg.batch_size, 1)
    t0 = time.monotonic()

    with open(metrics_path, mode, newline="") as metrics:
        if mode == "w":
            metrics.write(METRICS_HEADER + "\n")
        for epoch in range(start_epoch, cfg.epochs):
            order = epoch_order(cfg.seed, epoch, len(localizer_images))
            for it in range(iters_per_epoch):
                patches, labels = stream.batch(step * cfg.batch_size, cfg.batch_size,
                                               cfg.assessor_flip)
                a_loss = assessor_step(ass, adam_ass, patches, labels, cfg)
                images = _localizer_batch(localizer_images, order, epoch,
                                          it * cfg.batch_size, cfg)
                l_loss, _, mean_score, area_frac = localizer_step(
                    loc, ass, adam_loc, images, cfg)
                step += 1
                wall = time.monotonic() - t0
                metrics.write(f"{step},{epoch},{a_loss!r},{l_loss!r},"
                              f"{mean_score!r},{area_frac!r},{wall:.3f}\n")
                if log_fn:
                    log_fn(step, epoch, a_loss, l_loss, mean_score, area_frac)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir, loc, ass, adam_loc, adam_ass, cfg,
                                step, epoch + 1, prefix=f"checkpoint_e{epoch + 1:04d}")
    save_checkpoint(out_dir, loc, ass, adam_loc, adam_ass, cfg, step,
                    max(cfg.epochs, start_epoch))
    return os.path.join(out_dir, CHECKPOINT_MANIFEST), loc, ass
