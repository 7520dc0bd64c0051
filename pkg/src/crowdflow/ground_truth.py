"""Density-map and segmentation ground truth from head annotations.

Density maps and masks are plain 2D numpy arrays indexed [row, col]
(i.e. [y, x]); a density map's sum equals the head count of its frame.

Each head contributes a Gaussian bump truncated to a +-3 sigma square
window clipped at the frame edges, then renormalized so the in-frame
mass of every head is exactly 1. Adaptive mode scales sigma with the
mean distance to the k nearest annotated neighbors; heads without any
neighbor fall back to a fixed sigma.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .annotations import AnnotationError, FrameAnnotation

# Sentinel distance for a head with no other head in its frame.
NO_NEIGHBOR = float("inf")

_MIN_SIGMA = 1e-3


@dataclass
class KernelSpec:
    """Gaussian kernel settings for density ground truth.

    mode "fixed" uses ``sigma`` for every head; mode "adaptive" uses
    ``beta`` times the mean distance to the ``k`` nearest neighbors,
    with ``fallback_sigma`` for heads that have no neighbor.
    """

    mode: str = "fixed"
    sigma: float = 5.0
    beta: float = 0.3
    k: int = 3
    fallback_sigma: float = 5.0

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown kernel mode {self.mode!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.fallback_sigma <= 0:
            raise ValueError("fallback_sigma must be > 0")


def knn_mean_distance(heads, k: int) -> list[float]:
    """Mean Euclidean distance from each head to its k nearest other heads.

    Frames with fewer than k other heads average over all available ones;
    a head with no other head at all gets the NO_NEIGHBOR sentinel.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(heads)
    if n == 0:
        return []
    if n == 1:
        return [NO_NEIGHBOR]
    points = np.array([[h.x, h.y] for h in heads], dtype=np.float64)
    tree = cKDTree(points)
    # Query k+1 because each point finds itself at distance 0.
    n_query = min(k + 1, n)
    dists, _ = tree.query(points, k=n_query)
    # Drop the self column; with duplicate heads any zero column works.
    return [float(np.mean(row[1:])) for row in dists]


def _check_in_bounds(frame: FrameAnnotation, width: int, height: int):
    for head in frame.heads:
        if not (0 <= head.x < width and 0 <= head.y < height):
            raise AnnotationError(
                f"frame {frame.frame_index}: head ({head.x}, {head.y}) "
                f"outside {width}x{height} frame"
            )


def head_sigmas(frame: FrameAnnotation, spec: KernelSpec) -> list[float]:
    """Per-head Gaussian sigma under the given kernel spec."""
    if spec.mode == "fixed":
        return [spec.sigma] * len(frame.heads)
    sigmas = []
    for d in knn_mean_distance(frame.heads, spec.k):
        if not math.isfinite(d):
            sigmas.append(spec.fallback_sigma)
        else:
            sigmas.append(max(spec.beta * d, _MIN_SIGMA))
    return sigmas


def _add_gaussian(density, x, y, sigma, width, height):
    x0 = max(int(math.ceil(x - 3.0 * sigma)), 0)
    x1 = min(int(math.floor(x + 3.0 * sigma)), width - 1)
    y0 = max(int(math.ceil(y - 3.0 * sigma)), 0)
    y1 = min(int(math.floor(y + 3.0 * sigma)), height - 1)
    if x0 > x1 or y0 > y1:
        # Degenerate window (tiny sigma between pixel centers): put the
        # whole unit mass on the nearest in-frame pixel.
        px = min(max(int(round(x)), 0), width - 1)
        py = min(max(int(round(y)), 0), height - 1)
        density[py, px] += 1.0
        return
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    bump = np.exp(
        -((ys[:, None] - y) ** 2 + (xs[None, :] - x) ** 2) / (2.0 * sigma * sigma)
    )
    density[y0 : y1 + 1, x0 : x1 + 1] += bump / bump.sum()


def render_density(frame: FrameAnnotation, spec: KernelSpec, width: int, height: int):
    """Render the frame's density-map ground truth, one unit of mass per head."""
    _check_in_bounds(frame, width, height)
    density = np.zeros((height, width), dtype=np.float64)
    for head, sigma in zip(frame.heads, head_sigmas(frame, spec)):
        _add_gaussian(density, head.x, head.y, sigma, width, height)
    return density


def render_segmentation(frame: FrameAnnotation, radius: float, width: int, height: int):
    """Binary people-region mask: the union of discs centered on the heads."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    _check_in_bounds(frame, width, height)
    mask = np.zeros((height, width), dtype=np.float64)
    r2 = radius * radius
    for head in frame.heads:
        x0 = max(int(math.ceil(head.x - radius)), 0)
        x1 = min(int(math.floor(head.x + radius)), width - 1)
        y0 = max(int(math.ceil(head.y - radius)), 0)
        y1 = min(int(math.floor(head.y + radius)), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        inside = (ys[:, None] - head.y) ** 2 + (xs[None, :] - head.x) ** 2 <= r2
        region = mask[y0 : y1 + 1, x0 : x1 + 1]
        np.maximum(region, inside.astype(np.float64), out=region)
    return mask


def count_from_density(density) -> float:
    """People count: the sum over the density grid."""
    return float(np.asarray(density).sum())
