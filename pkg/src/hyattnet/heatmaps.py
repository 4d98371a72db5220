"""Gaussian heatmap encoding/decoding, the deep-supervision loss, and the
radial-error evaluation metrics."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ConfigError, ShapeError, Tensor

GAUSSIAN_NORM = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class LandmarkSet:
    """N (x, y) points in the pixel frame of a stated grid, with optional
    physical spacing in mm per pixel."""

    points: np.ndarray  # (N, 2) as (x, y)
    spacing_mm: float | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or self.points.shape[0] < 1:
            raise ShapeError(f"landmarks must be an (N, 2) array, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ConfigError("landmark coordinates must be finite")
        if self.spacing_mm is not None and self.spacing_mm <= 0:
            raise ConfigError(f"spacing must be positive, got {self.spacing_mm}")

    def __len__(self):
        return self.points.shape[0]


def encode_heatmap(landmarks, grid_hw, sigma: float, peak_normalize: bool = False) -> Tensor:
    """Per-landmark Gaussian likelihood maps on an (h, w) grid.

    Channel i holds exp(-((x - xi)^2 + (y - yi)^2) / (2 sigma^2)) scaled by
    1/(sqrt(2 pi) sigma), or by 1 when peak_normalize is set so the landmark
    pixel reads exactly 1. Landmarks outside the grid yield truncated
    near-zero channels rather than errors.
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    points = landmarks.points if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks, dtype=np.float64)
    h, w = grid_hw
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    dy2 = (ys[None, :, None] - points[:, 1][:, None, None]) ** 2
    dx2 = (xs[None, None, :] - points[:, 0][:, None, None]) ** 2
    amplitude = 1.0 if peak_normalize else GAUSSIAN_NORM / sigma
    maps = amplitude * np.exp(-(dx2 + dy2) / (2.0 * sigma * sigma))
    return Tensor(maps)


def decode_heatmap(heatmap, refine_quarter_pixel: bool = False) -> LandmarkSet:
    """Argmax decode of an (N, h, w) heatmap stack to (x, y) points.

    Ties resolve to the lowest linear (row-major) index. With refinement on,
    each coordinate shifts a quarter pixel toward the larger axis neighbor.
    """
    data = heatmap.data if isinstance(heatmap, Tensor) else np.asarray(heatmap)
    n, h, w = data.shape
    flat_idx = data.reshape(n, -1).argmax(axis=1)
    ys = (flat_idx // w).astype(np.float64)
    xs = (flat_idx % w).astype(np.float64)
    if refine_quarter_pixel:
        for i in range(n):
            y, x = int(ys[i]), int(xs[i])
            if 0 < x < w - 1:
                xs[i] += 0.25 * np.sign(data[i, y, x + 1] - data[i, y, x - 1])
            if 0 < y < h - 1:
                ys[i] += 0.25 * np.sign(data[i, y + 1, x] - data[i, y - 1, x])
    return LandmarkSet(np.stack([xs, ys], axis=1))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = ops.sub(pred, target)
    return ops.mean_all(ops.mul(diff, diff))


def rescale_grid_points(points: np.ndarray, from_hw, to_hw) -> np.ndarray:
    """Map (x, y) pixel-center coordinates between two grids of the same
    field of view (half-pixel-center alignment, matching bilinear_resize)."""
    points = np.asarray(points, dtype=np.float64)
    fh, fw = from_hw
    th, tw = to_hw
    out = points.copy()
    out[..., 0] = (points[..., 0] + 0.5) * (tw / fw) - 0.5
    out[..., 1] = (points[..., 1] + 0.5) * (th / fh) - 0.5
    return out


def combined_loss(pred_stack, landmarks_batch: np.ndarray, input_hw, sigmas,
                  weights, peak_normalize: bool = True) -> Tensor:
    """Weighted sum of per-head MSEs against Gaussian targets.

    ``landmarks_batch`` is (B, N, 2) in input-image pixels; targets are
    re-encoded on each head's grid with that head's sigma, coordinates
    mapped center-aligned so upsampled peaks sit on the annotated pixels.
    """
    landmarks_batch = np.asarray(landmarks_batch, dtype=np.float64)
    total = None
    heads = (pred_stack.h1, pred_stack.h2, pred_stack.h3)
    for head, sigma, weight in zip(heads, sigmas, weights):
        b, n, h, w = head.shape
        if landmarks_batch.shape[:2] != (b, n):
            raise ShapeError(
                f"combined_loss: head carries {(b, n)} maps but landmarks are "
                f"{landmarks_batch.shape[:2]}"
            )
        scaled = rescale_grid_points(landmarks_batch, input_hw, (h, w))
        target = np.stack(
            [encode_heatmap(scaled[i], (h, w), sigma, peak_normalize).data for i in range(b)]
        ).astype(head.data.dtype)
        term = ops.mul(mse(head, Tensor(target)), float(weight))
        total = term if total is None else ops.add(total, term)
    return total


def radial_errors(pred: LandmarkSet, gt: LandmarkSet) -> np.ndarray:
    """Euclidean distance per landmark, in mm when spacing is present."""
    if len(pred) != len(gt):
        raise ShapeError(f"landmark counts differ: {len(pred)} vs {len(gt)}")
    if pred.spacing_mm != gt.spacing_mm and None in (pred.spacing_mm, gt.spacing_mm):
        raise ConfigError("one landmark set has spacing and the other does not")
    if pred.spacing_mm is not None and gt.spacing_mm is not None \
            and pred.spacing_mm != gt.spacing_mm:
        raise ConfigError(
            f"spacing mismatch: {pred.spacing_mm} vs {gt.spacing_mm} mm/px"
        )
    deltas = pred.points - gt.points
    r = np.sqrt((deltas ** 2).sum(axis=1))
    if gt.spacing_mm is not None:
        r = r * gt.spacing_mm
    return r


def mre(pred: LandmarkSet, gt: LandmarkSet):
    """Mean radial error, its population standard deviation, and the
    per-landmark distances."""
    r = radial_errors(pred, gt)
    return float(r.mean()), float(r.std()), r


def sdr(errors: np.ndarray, thresholds) -> dict[float, float]:
    """Successful detection rate: percent of errors strictly below each
    threshold."""
    errors = np.asarray(errors, dtype=np.float64)
    out = {}
    for z in thresholds:
        if z <= 0:
            raise ConfigError(f"sdr thresholds must be positive, got {z}")
        out[float(z)] = float((errors < z).sum() / errors.size * 100.0)
    return out


@dataclass
class EvalReport:
    """Aggregated radial-error metrics over an evaluation set."""

    mre: float
    std: float
    unit: str  # "mm" or "px"
    n_landmarks: int
    per_point: np.ndarray = field(repr=False)
    sdr: dict[float, float] = field(default_factory=dict)

    @classmethod
    def from_errors(cls, errors: np.ndarray, unit: str, thresholds) -> "EvalReport":
        errors = np.asarray(errors, dtype=np.float64)
        return cls(
            mre=float(errors.mean()),
            std=float(errors.std()),
            unit=unit,
            n_landmarks=int(errors.size),
            per_point=errors,
            sdr=sdr(errors, thresholds),
        )

    def summary_line(self) -> str:
        return (f"mre={self.mre!r} std={self.std!r} "
                f"n_landmarks={self.n_landmarks} unit={self.unit}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("threshold,sdr_percent\n")
        for z in sorted(self.sdr):
            buf.write(f"{z!r},{self.sdr[z]!r}\n")
        return buf.getvalue()
