"""Synthetic scenes, sequential frame streams, and reconstruction scoring.

A scene is a deterministic point-cloud generator: surfaces in a box of
side ``extent`` centered at the origin, carrying a smooth parametric
RGB field.  Centering keeps coordinate magnitudes (and so the raw
second moments the trainer accumulates) as small as the geometry
allows, which matters once those moments flow through reduced-precision
arithmetic.  Frames are sampled from a sliding window that moves along
x, so earlier regions stop being observed and the stream is genuinely
non-stationary; a model trained on it must retain old regions without
ever re-reading them.

Reconstruction quality is scored on a fixed held-out query set: the
model predicts a color at each query position (responsibility-weighted
color means, spatial modality only) and the peak signal-to-noise ratio
is computed on the 0..255 scale, reported as a mean and 95% confidence
interval over spatial strata.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .vbmix.model import MixtureModel, spatial_responsibilities

__all__ = [
    "SceneSpec",
    "EvalSet",
    "EvalResult",
    "color_field",
    "frame_points",
    "frame_stream",
    "frame_window",
    "make_eval_set",
    "predict_color",
    "psnr",
    "evaluate",
]

FAMILIES = ("corridor", "spheres")

# Per-channel projection directions and wave parameters for the color
# field; chosen so every channel varies along every axis but none are
# colinear.
_COLOR_DIRS = np.array([[1.0, 0.3, 0.2], [0.2, 1.0, 0.3], [0.3, 0.2, 1.0]])
_COLOR_FREQS = (1.0, 1.3, 0.7)
_COLOR_PHASES = (0.0, 1.0, 2.0)


@dataclass(frozen=True)
class SceneSpec:
    family: str = "corridor"
    extent: float = 10.0
    seed: int = 0
    n_frames: int = 50
    points_per_frame: int = 2048
    overlap: float = 0.5
    # Isotropic sensor-noise displacement of sampled surface points.
    # Keeping surfaces slightly thick also keeps every component's data
    # covariance full-rank, which flat geometry would otherwise deny:
    # the variance floor it provides grows linearly in a component's
    # soft count while accumulated rounding noise grows as its square
    # root, so thickness bounds the noise-to-signal ratio of the
    # second moments for heavily used components.
    thickness: float = 0.15
    color_freqs: tuple[float, float, float] = _COLOR_FREQS
    color_phases: tuple[float, float, float] = _COLOR_PHASES

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown scene family {self.family!r}; choose from {FAMILIES}")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if not (0.0 <= self.overlap < 1.0):
            raise ValueError("overlap must be in [0, 1)")
        if self.extent <= 0 or self.points_per_frame < 1:
            raise ValueError("extent and points_per_frame must be positive")
        if self.thickness < 0:
            raise ValueError("thickness must be >= 0")


def color_field(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Smooth RGB in [0.05, 0.95] as phase-shifted waves over position."""
    u = np.asarray(points, dtype=np.float64) @ _COLOR_DIRS.T / spec.extent
    f = np.asarray(spec.color_freqs)
    p = np.asarray(spec.color_phases)
    return 0.5 + 0.45 * np.sin(2.0 * np.pi * f * u + p)


def frame_window(spec: SceneSpec, index: int) -> tuple[float, float]:
    """The x-interval observed by frame ``index``; consecutive windows
    overlap by the configured fraction and their union is the full
    [-extent/2, extent/2] span."""
    if not (0 <= index < spec.n_frames):
        raise ValueError(f"frame index {index} out of range")
    width = spec.extent / (1.0 + (spec.n_frames - 1) * (1.0 - spec.overlap))
    x0 = -0.5 * spec.extent + index * (1.0 - spec.overlap) * width
    return x0, x0 + width


def _corridor_positions(rng, n: int, x_lo: float, x_hi: float, extent: float) -> np.ndarray:
    # Four walls of a square tube along x: y = +-e/2, z = +-e/2.
    h = 0.5 * extent
    x = rng.uniform(x_lo, x_hi, n)
    t = rng.uniform(-h, h, n)
    wall = rng.integers(0, 4, n)
    y = np.where(wall == 0, -h, np.where(wall == 1, h, t))
    z = np.where(wall == 2, -h, np.where(wall == 3, h, t))
    # walls 0/1 vary z, walls 2/3 vary y
    z = np.where(wall < 2, t, z)
    return np.column_stack([x, y, z])


def _sphere_centers(spec: SceneSpec) -> tuple[np.ndarray, float]:
    rng = np.random.default_rng([spec.seed, 500])
    k = 6
    radius = spec.extent / 10.0
    h = 0.5 * spec.extent
    cx = np.linspace(radius - h, h - radius, k)
    cyz = rng.uniform(radius - h, h - radius, (k, 2))
    return np.column_stack([cx, cyz]), radius


def _sphere_positions(spec, rng, n: int, x_lo: float, x_hi: float) -> np.ndarray:
    centers, radius = _sphere_centers(spec)
    visible = np.nonzero((centers[:, 0] >= x_lo - radius) & (centers[:, 0] <= x_hi + radius))[0]
    if visible.size == 0:
        visible = np.array([int(np.argmin(np.abs(centers[:, 0] - 0.5 * (x_lo + x_hi))))])
    which = visible[rng.integers(0, visible.size, n)]
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return centers[which] + radius * direction


def _positions(spec: SceneSpec, rng, n: int, x_lo: float, x_hi: float) -> np.ndarray:
    if spec.family == "corridor":
        pos = _corridor_positions(rng, n, x_lo, x_hi, spec.extent)
    else:
        pos = _sphere_positions(spec, rng, n, x_lo, x_hi)
    if spec.thickness > 0:
        pos = pos + spec.thickness * rng.standard_normal(pos.shape)
    return pos


def frame_points(spec: SceneSpec, index: int) -> np.ndarray:
    """One frame as a (P, 6) array: positions then colors."""
    rng = np.random.default_rng([spec.seed, 1000 + index])
    x_lo, x_hi = frame_window(spec, index)
    pos = _positions(spec, rng, spec.points_per_frame, x_lo, x_hi)
    return np.hstack([pos, color_field(spec, pos)])


def frame_stream(spec: SceneSpec) -> Iterator[np.ndarray]:
    """Single-pass ordered frame generator (the consumer cannot rewind)."""
    for i in range(spec.n_frames):
        yield frame_points(spec, i)


@dataclass(frozen=True)
class EvalSet:
    """Held-out queries with ground-truth colors, labeled by x-stratum."""

    points: np.ndarray  # (Q, 3)
    colors: np.ndarray  # (Q, 3)
    strata: np.ndarray  # (Q,) int


def make_eval_set(spec: SceneSpec, n_queries: int = 2048, n_strata: int = 20) -> EvalSet:
    """Fixed evaluation queries stratified along x over the full scene.

    Drawn from a dedicated seed stream, so they are distinct from every
    training frame while following the same surface distribution.
    """
    rng = np.random.default_rng([spec.seed, 777])
    counts = np.full(n_strata, n_queries // n_strata)
    counts[: n_queries % n_strata] += 1
    pts, labels = [], []
    edges = np.linspace(-0.5 * spec.extent, 0.5 * spec.extent, n_strata + 1)
    for j in range(n_strata):
        pts.append(_positions(spec, rng, int(counts[j]), edges[j], edges[j + 1]))
        labels.append(np.full(int(counts[j]), j))
    points = np.vstack(pts)
    return EvalSet(points=points, colors=color_field(spec, points), strata=np.concatenate(labels))


def predict_color(model: MixtureModel, points: np.ndarray) -> np.ndarray:
    """Responsibility-weighted color means at spatial queries, clamped to [0,1]."""
    w = spatial_responsibilities(model, points)
    return np.clip(w @ model.color.mean, 0.0, 1.0)


def psnr(pred: np.ndarray, truth: np.ndarray) -> float:
    """10 log10(255^2 / MSE) with colors rescaled from [0,1] to 0..255."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    mse = float(np.mean((255.0 * (pred - truth)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(255.0**2 / mse)


@dataclass(frozen=True)
class EvalResult:
    psnr_mean: float  # mean over strata
    psnr_ci95: float  # 1.96 * stderr over strata
    psnr_overall: float  # pooled over all queries


def evaluate(model: MixtureModel, eval_set: EvalSet) -> EvalResult:
    pred = predict_color(model, eval_set.points)
    per_stratum = []
    for j in np.unique(eval_set.strata):
        m = eval_set.strata == j
        per_stratum.append(psnr(pred[m], eval_set.colors[m]))
    per_stratum = np.asarray(per_stratum)
    mean = float(per_stratum.mean())
    with np.errstate(invalid="ignore"):  # an exact stratum gives inf PSNR
        ci = float(1.96 * per_stratum.std(ddof=1) / np.sqrt(per_stratum.size))
    return EvalResult(psnr_mean=mean, psnr_ci95=ci, psnr_overall=psnr(pred, eval_set.colors))
