"""Run configuration: a strict JSON document covering data generation,
training, and evaluation.  Unknown keys are rejected with their full path;
missing keys fall back to the documented defaults.
"""

import json
import os

from .errors import ConfigurationError
from .train import ArchSpec, TrainConfig

DATA_DEFAULTS = {
    "generator": "toy",            # "toy" or "dirs"
    "template_dir": None,          # required for "dirs"
    "background_dir": None,
    "canvas_size": [96, 96],
    "assessor_count": 2000,
    "strata": 10,
    "localizer_train_count": 1000,
    "test_count": 200,
    "noisy_fraction": 0.0,
    "patch_size": [24, 24],
    "template_count": 8,
    "background_count": 16,
    "scene_scale_range": [0.25, 0.6],
    "assessor_scale_range": [0.1, 0.9],
    "work_size": None,
}

TRAIN_DEFAULTS = {
    "batch_size": 32,
    "epochs": 20,
    "learning_rate": 1e-4,
    "localizer_input": [48, 48],
    "assessor_input": [24, 24],
    "target_score": 1.0,
    "direction_weight": 1.0,
    "outside_weight": 1.0,
    "grad_clip": 5.0,
    "assessor_flip": True,
    "localizer_augment": True,
    "checkpoint_every": 0,
    "localizer_arch": {"stem_channels": 16, "block_channels": [16, 32],
                       "block_strides": [1, 2], "coord_channels": True},
    "assessor_arch": {"block_channels": [32, 32, 32, 32],
                      "block_strides": [2, 2, 1, 1]},
}

EVAL_DEFAULTS = {
    "iou_threshold": 0.5,
}

TOP_DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/default",
    "data_dir": None,              # defaults to <out_dir>/data
}


def _merge_section(raw, defaults, path):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path} must be an object")
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ConfigurationError(f"unknown config keys under {path}: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(raw)
    return merged


class RunConfig:
    def __init__(self, document):
        if not isinstance(document, dict):
            raise ConfigurationError("config root must be a JSON object")
        sections = {"data", "train", "eval"}
        top = {k: v for k, v in document.items() if k not in sections}
        top = _merge_section(top, TOP_DEFAULTS, "<root>")
        self.seed = top["seed"]
        self.out_dir = top["out_dir"]
        self.data = _merge_section(document.get("data", {}), DATA_DEFAULTS, "data")
        self.train = _merge_section(document.get("train", {}), TRAIN_DEFAULTS, "train")
        self.eval = _merge_section(document.get("eval", {}), EVAL_DEFAULTS, "eval")
        self._data_dir = top["data_dir"]
        self._validate()

    @property
    def data_dir(self):
        return self._data_dir or os.path.join(self.out_dir, "data")

    def _validate(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        d, t = self.data, self.train
        if d["generator"] not in ("toy", "dirs"):
            raise ConfigurationError("data.generator must be 'toy' or 'dirs'")
        if d["generator"] == "dirs":
            for key in ("template_dir", "background_dir"):
                if not d[key]:
                    raise ConfigurationError(f"data.{key} required for generator 'dirs'")
        for key in ("assessor_count", "strata", "localizer_train_count", "test_count"):
            if not isinstance(d[key], int) or d[key] < 1:
                raise ConfigurationError(f"data.{key} must be a positive integer")
        if not 0.0 <= d["noisy_fraction"] <= 1.0:
            raise ConfigurationError("data.noisy_fraction must lie in [0, 1]")
        if t["batch_size"] < 1 or t["epochs"] < 0:
            raise ConfigurationError("train.batch_size >= 1 and train.epochs >= 0 required")
        if not 0.0 <= t["target_score"] <= 1.0:
            raise ConfigurationError("train.target_score must lie in [0, 1]")
        for key in ("localizer_input", "assessor_input"):
            dims = t[key]
            if (not isinstance(dims, (list, tuple)) or len(dims) != 2
                    or min(dims) < 2):
                raise ConfigurationError(f"train.{key} must be [H, W] with H, W >= 2")
        if list(d["patch_size"]) != list(t["assessor_input"]):
            raise ConfigurationError(
                "data.patch_size must equal train.assessor_input")
        if not 0.0 < self.eval["iou_threshold"] <= 1.0:
            raise ConfigurationError("eval.iou_threshold must lie in (0, 1]")

    def train_config(self, channel_means=(0.0, 0.0, 0.0), seed=None, epochs=None):
        t = self.train
        return TrainConfig(
            seed=self.seed if seed is None else seed,
            batch_size=t["batch_size"],
            epochs=t["epochs"] if epochs is None else epochs,
            learning_rate=t["learning_rate"],
            localizer_input=tuple(t["localizer_input"]),
            assessor_input=tuple(t["assessor_input"]),
            target_score=t["target_score"],
            direction_weight=t["direction_weight"],
            outside_weight=t["outside_weight"],
            grad_clip=t["grad_clip"],
            assessor_flip=t["assessor_flip"],
            localizer_augment=t["localizer_augment"],
            channel_means=tuple(channel_means),
            checkpoint_every=t["checkpoint_every"],
            localizer_arch=ArchSpec(
                stem_channels=t["localizer_arch"].get("stem_channels", 16),
                block_channels=tuple(t["localizer_arch"]["block_channels"]),
                block_strides=tuple(t["localizer_arch"]["block_strides"]),
                coord_channels=t["localizer_arch"].get("coord_channels", True)),
            assessor_arch=ArchSpec(
                stem_channels=0,
                block_channels=tuple(t["assessor_arch"]["block_channels"]),
                block_strides=tuple(t["assessor_arch"]["block_strides"])),
        )


def load_config(path, overrides=None):
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            document = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON in {path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            document[key] = value
    return RunConfig(document)
