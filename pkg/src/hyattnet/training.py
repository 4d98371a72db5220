"""Training and evaluation drivers behind the CLI.

Runs are fully deterministic for a fixed seed: parameter init, batch order
and augmentation draws all come from seeded generators, so repeated runs
produce identical loss curves and byte-identical checkpoints. The HYATT_SEED
environment variable overrides the configured seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import figures
from .data import DatasetManifest, load_dataset, random_affine
from .heatmaps import EvalReport, LandmarkSet, radial_errors
from .network import HyattConfig, HyattNet, load_checkpoint, save_checkpoint
from .optim import AdamW
from .tensor import ConfigError, Tape, Tensor, backward

DEFAULT_SDR_THRESHOLDS = (2.0, 2.5, 3.0, 4.0)


@dataclass
class TrainConfig:
    model: HyattConfig
    manifest: str
    batch_size: int = 2
    iterations: int | None = None  # optimizer steps; falls back to model.epochs
    augment: bool = False
    val_manifest: str | None = None
    sdr_thresholds: tuple = DEFAULT_SDR_THRESHOLDS

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")


_HARNESS_KEYS = {"manifest", "batch_size", "iterations", "augment",
                 "val_manifest", "sdr_thresholds"}
_MODEL_KEYS = {f.name for f in fields(HyattConfig)}


def apply_seed_override(seed: int) -> int:
    value = os.environ.get("HYATT_SEED")
    if value is None:
        return seed
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"HYATT_SEED must be an integer, got {value!r}") from None


def parse_model_config(doc: dict) -> HyattConfig:
    unknown = set(doc) - _MODEL_KEYS - _HARNESS_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: v for k, v in doc.items() if k in _MODEL_KEYS}
    cfg = HyattConfig(**kwargs)
    cfg.seed = apply_seed_override(cfg.seed)
    return cfg


def load_train_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    model = parse_model_config(doc)
    if "manifest" not in doc:
        raise ConfigError("training config must name a dataset manifest")
    base = os.path.dirname(os.path.abspath(os.fspath(path)))

    def resolve(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base, p)

    harness = {k: doc[k] for k in _HARNESS_KEYS if k in doc}
    harness["manifest"] = resolve(harness["manifest"])
    if harness.get("val_manifest"):
        harness["val_manifest"] = resolve(harness["val_manifest"])
    if "sdr_thresholds" in harness:
        harness["sdr_thresholds"] = tuple(harness["sdr_thresholds"])
    return TrainConfig(model=model, **harness)


def _check_dataset(model: HyattConfig, manifest: DatasetManifest, what: str) -> None:
    if manifest.num_landmarks != model.num_landmarks:
        raise ConfigError(
            f"{what} carries {manifest.num_landmarks} landmarks, "
            f"model expects {model.num_landmarks}"
        )
    if tuple(manifest.target_size) != tuple(model.input_size):
        raise ConfigError(
            f"{what} target size {manifest.target_size} differs from the model "
            f"input size {model.input_size}"
        )


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    history: list = field(default_factory=list)  # (epoch, mean loss) rows
    net: HyattNet | None = None

    @property
    def initial_loss(self) -> float:
        return self.history[0][1]

    @property
    def final_loss(self) -> float:
        return self.history[-1][1]


def _dataset_loss(net: HyattNet, images: np.ndarray, landmarks: np.ndarray,
                  batch_size: int) -> float:
    losses = []
    for start in range(0, len(images), batch_size):
        batch = Tensor(images[start:start + batch_size][:, None])
        stack = net.forward(batch, training=True)
        losses.append(float(net.loss(stack, landmarks[start:start + batch_size])))
    return float(np.mean(losses))


def train(cfg: TrainConfig, out_dir) -> TrainResult:
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    model = cfg.model
    manifest, images, landmarks, _ = load_dataset(cfg.manifest)
    _check_dataset(model, manifest, "training manifest")
    val_data = None
    if cfg.val_manifest:
        val_manifest, val_images, val_landmarks, val_spacings = load_dataset(cfg.val_manifest)
        _check_dataset(model, val_manifest, "validation manifest")
        val_data = (val_images, val_landmarks, val_spacings)

    net = HyattNet(model)
    optimizer = AdamW(net.parameters(), lr=model.lr, weight_decay=model.weight_decay)
    n = len(images)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.iterations if cfg.iterations is not None \
        else model.epochs * steps_per_epoch
    order_rng = np.random.default_rng(model.seed + 1)
    augment_rng = np.random.default_rng(model.seed + 2)

    history = [(0, _dataset_loss(net, images, landmarks, cfg.batch_size))]
    val_history = {}
    step = 0
    epoch = 0
    while step < total_steps:
        epoch += 1
        order = order_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_images = images[idx].copy()
            batch_landmarks = landmarks[idx].copy()
            if cfg.augment:
                for j in range(len(idx)):
                    batch_images[j], batch_landmarks[j] = random_affine(
                        batch_images[j], batch_landmarks[j], augment_rng)
            with Tape() as tape:
                stack = net.forward(Tensor(batch_images[:, None]), training=True)
                loss = net.loss(stack, batch_landmarks)
            optimizer.zero_grad()
            backward(loss, tape)
            optimizer.step()
            epoch_losses.append(float(loss))
            step += 1
            if step >= total_steps:
                break
        history.append((epoch, float(np.mean(epoch_losses))))
        if val_data is not None:
            report = _evaluate_arrays(net, *val_data, thresholds=cfg.sdr_thresholds)
            val_history[epoch] = report.mre

    checkpoint_path = os.path.join(out_dir, "checkpoint.hyatt")
    save_checkpoint(net, checkpoint_path)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss" + (",val_mre" if val_data is not None else "") + "\n")
        for ep, value in history:
            if val_data is not None:
                val = val_history.get(ep)
                fh.write(f"{ep},{value!r},{'' if val is None else repr(val)}\n")
            else:
                fh.write(f"{ep},{value!r}\n")
    figures.save_loss_curve([ep for ep, _ in history], [v for _, v in history],
                            os.path.join(out_dir, "loss_curve.png"))
    return TrainResult(checkpoint_path=checkpoint_path, metrics_path=metrics_path,
                       history=history, net=net)


def _evaluate_arrays(net: HyattNet, images: np.ndarray, landmarks: np.ndarray,
                     spacings, thresholds) -> EvalReport:
    have_spacing = [s is not None for s in spacings]
    if any(have_spacing) and not all(have_spacing):
        raise ConfigError("manifest mixes samples with and without pixel spacing")
    unit = "mm" if all(have_spacing) and spacings else "px"
    errors = []
    batch = 4
    for start in range(0, len(images), batch):
        chunk = images[start:start + batch]
        points = net.predict(Tensor(chunk[:, None]))
        for j in range(len(chunk)):
            spacing = spacings[start + j]
            r = radial_errors(
                LandmarkSet(points[j], spacing_mm=spacing),
                LandmarkSet(landmarks[start + j], spacing_mm=spacing),
            )
            errors.append(r)
    return EvalReport.from_errors(np.concatenate(errors), unit, thresholds)


def evaluate(checkpoint_path, manifest_path, out_dir,
             thresholds=DEFAULT_SDR_THRESHOLDS) -> EvalReport:
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    net = load_checkpoint(checkpoint_path)
    manifest, images, landmarks, spacings = load_dataset(manifest_path)
    _check_dataset(net.cfg, manifest, "evaluation manifest")
    report = _evaluate_arrays(net, images, landmarks, spacings, thresholds)

    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.summary_line() + "\n")
    with open(os.path.join(out_dir, "per_point_errors.csv"), "w", encoding="utf-8") as fh:
        fh.write("index,radial_error\n")
        for i, value in enumerate(report.per_point):
            fh.write(f"{i},{value!r}\n")
    figures.save_sdr_chart(report, os.path.join(out_dir, "sdr_chart.png"))
    figures.save_error_histogram(report, os.path.join(out_dir, "error_hist.png"))
    preview = net.predict(Tensor(images[:1][:, None]))[0]
    figures.save_prediction_overlay(images[0], preview, landmarks[0],
                                    os.path.join(out_dir, "overlay_sample0.png"))
    return report
