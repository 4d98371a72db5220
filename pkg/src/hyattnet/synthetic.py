"""Deterministic synthetic dataset: smooth anatomy-like figures made of
nested elliptic ridges plus a connecting curve, with landmarks at analytic
loci on the outer ellipse."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .data import DatasetManifest, ManifestSample, save_manifest
from .tensor import ConfigError


@dataclass
class SyntheticSpec:
    count: int = 8
    image_size: int = 128
    num_landmarks: int = 4
    noise: float = 0.02
    seed: int = 0
    spacing_mm: float | None = None
    # geometry ranges, as fractions of the image size
    center_jitter: float = 0.04
    axis_range: tuple = (0.28, 0.42)
    inner_scale: float = 0.55
    ridge_width: float = 0.06

    def __post_init__(self):
        if self.count < 1 or self.image_size < 16 or self.num_landmarks < 1:
            raise ConfigError("synthetic spec needs count >= 1, size >= 16, landmarks >= 1")
        if self.noise < 0:
            raise ConfigError(f"noise level must be non-negative, got {self.noise}")
        lo, hi = self.axis_range
        if not 0 < lo <= hi or hi + self.center_jitter >= 0.5:
            raise ConfigError("ellipse axes plus center jitter must stay inside the image")


def sample_geometry(rng: np.random.Generator, spec: SyntheticSpec) -> dict:
    """Random figure parameters and the analytic landmark positions."""
    size = spec.image_size
    cx = size * (0.5 + rng.uniform(-spec.center_jitter, spec.center_jitter))
    cy = size * (0.5 + rng.uniform(-spec.center_jitter, spec.center_jitter))
    a = size * rng.uniform(*spec.axis_range)
    b = size * rng.uniform(*spec.axis_range)
    theta = rng.uniform(0, 2 * np.pi)
    phases = 2 * np.pi * np.arange(spec.num_landmarks) / spec.num_landmarks
    ex = a * np.cos(phases)
    ey = b * np.sin(phases)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    landmarks = np.stack([
        cx + ex * cos_t - ey * sin_t,
        cy + ex * sin_t + ey * cos_t,
    ], axis=1)
    curve_from = int(rng.integers(spec.num_landmarks))
    curve_bend = rng.uniform(0.25, 0.75)
    return {
        "center": (cx, cy), "axes": (a, b), "theta": theta,
        "landmarks": landmarks, "curve_from": curve_from, "curve_bend": curve_bend,
    }


def render_image(geom: dict, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Grayscale float image in [0, 1] for one sampled figure."""
    size = spec.image_size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = geom["center"]
    a, b = geom["axes"]
    cos_t, sin_t = np.cos(geom["theta"]), np.sin(geom["theta"])
    u = (xs - cx) * cos_t + (ys - cy) * sin_t
    v = -(xs - cx) * sin_t + (ys - cy) * cos_t

    img = np.zeros((size, size))
    width = spec.ridge_width
    for scale, gain in ((1.0, 0.9), (spec.inner_scale, 0.6)):
        q = (u / (a * scale)) ** 2 + (v / (b * scale)) ** 2
        img += gain * np.exp(-((q - 1.0) ** 2) / (2 * width * width))
    img += 0.15 * np.exp(-((u / a) ** 2 + (v / b) ** 2) / 1.5)

    # quadratic bezier ridge from one landmark to the next, bent toward center
    marks = geom["landmarks"]
    p0 = marks[geom["curve_from"]]
    p2 = marks[(geom["curve_from"] + 1) % len(marks)]
    mid = 0.5 * (p0 + p2)
    ctrl = mid + geom["curve_bend"] * (np.array([cx, cy]) - mid)
    t = np.linspace(0.0, 1.0, 64)[:, None]
    curve = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * ctrl + t ** 2 * p2
    d2 = np.min(
        (xs[None] - curve[:, 0, None, None]) ** 2 + (ys[None] - curve[:, 1, None, None]) ** 2,
        axis=0,
    )
    img += 0.5 * np.exp(-d2 / (2 * 1.5 ** 2))

    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write PNG images plus a manifest; identical spec and seed give
    byte-identical files."""
    out_dir = os.fspath(out_dir)
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    samples = []
    for i in range(spec.count):
        geom = sample_geometry(rng, spec)
        img = render_image(geom, spec, rng)
        quantized = np.round(img * 255.0).astype(np.uint8)
        rel_path = os.path.join("images", f"sample_{i:04d}.png")
        Image.fromarray(quantized, mode="L").save(os.path.join(out_dir, rel_path))
        samples.append(ManifestSample(
            image=rel_path.replace(os.sep, "/"),
            landmarks=geom["landmarks"],
            spacing_mm=spec.spacing_mm,
        ))
    manifest = DatasetManifest(
        num_landmarks=spec.num_landmarks,
        target_size=(spec.image_size, spec.image_size),
        samples=samples,
    )
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest
