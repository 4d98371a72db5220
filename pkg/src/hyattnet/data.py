"""Dataset manifest IO and sample loading.

Manifest schema (UTF-8 JSON):
{"num_landmarks": int, "target_size": [h, w],
 "samples": [{"image": str, "landmarks": [[x, y], ...], "spacing_mm": number|null}]}

Image paths are relative to the manifest file. On load, images are resized
to target_size and landmark coordinates scaled by (target / original) per
axis.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import ops
from .tensor import ConfigError, Tensor


@dataclass
class ManifestSample:
    image: str
    landmarks: np.ndarray  # (N, 2) as (x, y) in original-image pixels
    spacing_mm: float | None = None

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64)


@dataclass
class DatasetManifest:
    num_landmarks: int
    target_size: tuple  # (h, w)
    samples: list = field(default_factory=list)

    def __post_init__(self):
        self.target_size = tuple(int(v) for v in self.target_size)
        for i, sample in enumerate(self.samples):
            if sample.landmarks.shape != (self.num_landmarks, 2):
                raise ConfigError(
                    f"sample {i} has {sample.landmarks.shape[0]} landmarks, "
                    f"manifest declares {self.num_landmarks}"
                )

    def __len__(self):
        return len(self.samples)


def manifest_to_json(manifest: DatasetManifest) -> str:
    doc = {
        "num_landmarks": manifest.num_landmarks,
        "target_size": list(manifest.target_size),
        "samples": [
            {
                "image": s.image,
                "landmarks": [[float(x), float(y)] for x, y in s.landmarks],
                "spacing_mm": s.spacing_mm,
            }
            for s in manifest.samples
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(manifest_to_json(manifest))


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        samples = [
            ManifestSample(
                image=s["image"],
                landmarks=np.asarray(s["landmarks"], dtype=np.float64),
                spacing_mm=s["spacing_mm"],
            )
            for s in doc["samples"]
        ]
        return DatasetManifest(
            num_landmarks=int(doc["num_landmarks"]),
            target_size=tuple(doc["target_size"]),
            samples=samples,
        )
    except KeyError as missing:
        raise ConfigError(f"manifest {path} is missing the {missing} field") from None


def load_image(path) -> np.ndarray:
    """Grayscale PNG to a float array in [0, 1] (8- or 16-bit input)."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return arr


def load_sample(manifest: DatasetManifest, index: int, base_dir) -> tuple:
    """One (image, landmarks, spacing) triple resized to the target grid."""
    sample = manifest.samples[index]
    path = os.path.join(os.fspath(base_dir), sample.image)
    if not os.path.exists(path):
        raise ConfigError(f"sample image not found: {path}")
    arr = load_image(path)
    th, tw = manifest.target_size
    oh, ow = arr.shape
    landmarks = sample.landmarks.copy()
    if (oh, ow) != (th, tw):
        arr = ops.bilinear_resize(Tensor(arr[None, None], dtype=np.float64), (th, tw)).data[0, 0]
        landmarks[:, 0] *= tw / ow
        landmarks[:, 1] *= th / oh
    return arr, landmarks, sample.spacing_mm


def load_dataset(manifest_path):
    """Manifest plus all referenced samples, materialized in memory."""
    manifest = load_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(os.fspath(manifest_path)))
    images, landmarks, spacings = [], [], []
    for i in range(len(manifest)):
        img, pts, spacing = load_sample(manifest, i, base)
        images.append(img.astype(np.float32))
        landmarks.append(pts)
        spacings.append(spacing)
    return manifest, np.stack(images), np.stack(landmarks), spacings


def random_affine(image: np.ndarray, landmarks: np.ndarray, rng: np.random.Generator,
                  max_shift: float = 0.05, max_scale: float = 0.05,
                  max_rotate_deg: float = 5.0) -> tuple:
    """Jointly shift/scale/rotate an image and its landmarks about the
    image center (bilinear resampling, zero fill outside)."""
    h, w = image.shape
    angle = np.deg2rad(rng.uniform(-max_rotate_deg, max_rotate_deg))
    scale = 1.0 + rng.uniform(-max_scale, max_scale)
    tx = rng.uniform(-max_shift, max_shift) * w
    ty = rng.uniform(-max_shift, max_shift) * h
    cos_a, sin_a = np.cos(angle) * scale, np.sin(angle) * scale
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    # forward map: p' = R S (p - c) + c + t; sample the image by its inverse
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xs - cx - tx
    dy = ys - cy - ty
    det = cos_a * cos_a + sin_a * sin_a
    src_x = (cos_a * dx + sin_a * dy) / det + cx
    src_y = (-sin_a * dx + cos_a * dy) / det + cy

    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    fx = src_x - x0
    fy = src_y - y0
    out = np.zeros_like(image)
    for oy, ox, weight in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                           (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi = y0 + oy
        xi = x0 + ox
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        out[valid] += weight[valid] * image[yi[valid], xi[valid]]

    moved = landmarks.copy()
    px = landmarks[:, 0] - cx
    py = landmarks[:, 1] - cy
    moved[:, 0] = cos_a * px - sin_a * py + cx + tx
    moved[:, 1] = sin_a * px + cos_a * py + cy + ty
    return out, moved
