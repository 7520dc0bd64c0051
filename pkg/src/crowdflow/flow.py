"""People-flow estimation between consecutive frames and motion priors.

A flow field maps a pixel (x, y) of the previous frame to (x + u, y + v)
in the current frame. Three interchangeable backends are supported:

* ``oracle`` passes through ground-truth flow (synthetic clips),
* ``block_matching`` is a self-contained classical SAD block matcher,
* ``external`` loads a precomputed ``FLO2`` file, standing in for any
  learned estimator run offline.
"""

from dataclasses import dataclass

import numpy as np

from . import formats


@dataclass
class FlowField:
    """Dense per-pixel motion (u = horizontal, v = vertical), pixels/frame."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise ValueError(f"u/v shape mismatch: {self.u.shape} vs {self.v.shape}")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def save(self, path):
        formats.write_flow(path, self.u, self.v)

    @classmethod
    def load(cls, path):
        u, v = formats.read_flow(path)
        return cls(u, v)

    @classmethod
    def zeros(cls, height: int, width: int):
        return cls(np.zeros((height, width)), np.zeros((height, width)))


@dataclass
class FlowEstimatorSpec:
    backend: str = "block_matching"
    block_size: int = 9
    search_radius: int = 4
    external_path: str | None = None

    def __post_init__(self):
        if self.backend not in ("oracle", "block_matching", "external"):
            raise ValueError(f"unknown flow backend {self.backend!r}")
        if self.block_size < 3 or self.block_size % 2 == 0:
            raise ValueError("block_size must be odd and >= 3")
        if self.search_radius < 1:
            raise ValueError("search_radius must be >= 1")


def _candidate_displacements(radius: int):
    # Preference order for SAD ties: smaller magnitude first, then
    # lexicographic (u, v).
    cands = [
        (du, dv)
        for du in range(-radius, radius + 1)
        for dv in range(-radius, radius + 1)
    ]
    cands.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    return cands


def _block_matching_flow(prev, curr, block_size: int, radius: int) -> FlowField:
    h, w = prev.shape
    u = np.zeros((h, w), dtype=np.float64)
    v = np.zeros((h, w), dtype=np.float64)
    cands = _candidate_displacements(radius)
    prev = prev.astype(np.float64, copy=False)
    curr = curr.astype(np.float64, copy=False)
    for y0 in range(0, h, block_size):
        y1 = min(y0 + block_size, h)
        for x0 in range(0, w, block_size):
            x1 = min(x0 + block_size, w)
            block = prev[y0:y1, x0:x1]
            best = (0, 0)
            best_sad = None
            for du, dv in cands:
                ty0, ty1 = y0 + dv, y1 + dv
                tx0, tx1 = x0 + du, x1 + du
                if ty0 < 0 or tx0 < 0 or ty1 > h or tx1 > w:
                    continue
                sad = np.abs(block - curr[ty0:ty1, tx0:tx1]).sum()
                if best_sad is None or sad < best_sad:
                    best_sad = sad
                    best = (du, dv)
            u[y0:y1, x0:x1] = best[0]
            v[y0:y1, x0:x1] = best[1]
    return FlowField(u, v)


def estimate_flow(
    frame_prev,
    frame_curr,
    spec: FlowEstimatorSpec,
    gt_flow: FlowField | None = None,
) -> FlowField:
    """Estimate dense people flow from frame T-1 to frame T.

    The oracle backend requires the clip's ground-truth flow in ``gt_flow``;
    the external backend reads ``spec.external_path``.
    """
    frame_prev = np.asarray(frame_prev)
    frame_curr = np.asarray(frame_curr)
    if frame_prev.shape != frame_curr.shape:
        raise ValueError(
            f"frame size mismatch: {frame_prev.shape} vs {frame_curr.shape}"
        )
    if frame_prev.ndim == 3:  # collapse RGB to luminance for matching
        frame_prev = frame_prev.mean(axis=2)
        frame_curr = frame_curr.mean(axis=2)
    h, w = frame_prev.shape

    if spec.backend == "oracle":
        if gt_flow is None:
            raise ValueError("oracle backend needs ground-truth flow")
        if gt_flow.u.shape != (h, w):
            raise ValueError(
                f"oracle flow size {gt_flow.u.shape} does not match frames {(h, w)}"
            )
        return FlowField(gt_flow.u.copy(), gt_flow.v.copy())

    if spec.backend == "external":
        if spec.external_path is None:
            raise ValueError("external backend needs external_path")
        flow = FlowField.load(spec.external_path)
        if flow.u.shape != (h, w):
            raise ValueError(
                f"external flow size {flow.u.shape} does not match frames {(h, w)}"
            )
        return flow

    return _block_matching_flow(frame_prev, frame_curr, spec.block_size, spec.search_radius)


def flow_magnitude_prior(flow: FlowField, tau: float = 1.0, tau_scale: float = 0.25):
    """Soft moving-object prior in (0, 1): sigmoid((|flow| - tau) / tau_scale)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    z = (flow.magnitude() - tau) / tau_scale
    return 1.0 / (1.0 + np.exp(-z))


def flow_color_encode(flow: FlowField) -> np.ndarray:
    """Color-wheel visualization of a flow field as an (H, W, 3) uint8 image.

    Hue encodes direction, saturation encodes magnitude normalized by the
    95th-percentile magnitude; zero flow renders white.
    """
    from matplotlib.colors import hsv_to_rgb

    mag = flow.magnitude()
    norm = np.percentile(mag, 95)
    if norm <= 0:
        norm = 1.0
    hue = (np.arctan2(flow.v, flow.u) / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / norm, 0.0, 1.0)
    val = np.ones_like(sat)
    rgb = hsv_to_rgb(np.stack([hue, sat, val], axis=-1))
    return (rgb * 255.0).round().astype(np.uint8)
