"""Deterministic synthetic crowd clips: frames, annotations and GT flow.

People are Gaussian blobs moving along straight trajectories with
boundary reflection. Every sample is drawn from numpy's PCG64 generator
seeded from the scene config, so a given seed reproduces the clip
bit-for-bit on any platform (the platform-default global RNG is never
touched).

Directory layout written by :func:`write_clip`::

    <out>/frames/%06d.png     8-bit grayscale frames
    <out>/flow/%06d.flo2      GT flow into frame %06d (files 000001..N-1)
    <out>/annotation.json     head annotations
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import ClipAnnotation, FrameAnnotation, HeadPoint, load_clip, save_clip
from .flow import FlowField

BLOB_AMPLITUDE = 0.8
# Pixels closer than this many blob sigmas to a head carry its motion.
FLOW_SUPPORT_SIGMAS = 2.0


@dataclass
class SynthSceneConfig:
    width: int = 64
    height: int = 64
    n_frames: int = 8
    n_people: int | tuple[int, int] = 8
    speed_range: tuple[float, float] = (0.5, 2.0)
    blob_sigma: float = 2.0
    background: str = "flat"
    noise_std: float = 0.01
    seed: int = 0
    # static blobs that look exactly like people but never move and are
    # not annotated; they make motion informative for counting (a range
    # keeps the count unknowable from a single frame)
    n_distractors: int | tuple[int, int] = 0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.background not in ("flat", "textured"):
            raise ValueError(f"unknown background {self.background!r}")
        if self.blob_sigma <= 0:
            raise ValueError("blob_sigma must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ValueError("speed_range must satisfy 0 <= min <= max")
        d = self.n_distractors
        if (d[0] < 0 or d[1] < d[0]) if isinstance(d, tuple) else d < 0:
            raise ValueError("n_distractors must be >= 0 (or a valid range)")

    def max_people(self) -> int:
        n = self.n_people
        return n[1] if isinstance(n, tuple) else n


@dataclass
class Trajectory:
    person_id: int
    positions: list[HeadPoint]
    velocities: list[tuple[float, float]]  # velocity in effect for step t -> t+1

    def displacement(self, t: int) -> tuple[float, float]:
        """Actual motion from frame t to t+1 (equals the velocity except
        across a boundary reflection)."""
        a, b = self.positions[t], self.positions[t + 1]
        return (b.x - a.x, b.y - a.y)


def _check_overlap_budget(config: SynthSceneConfig, n_people: int):
    support = math.pi * (FLOW_SUPPORT_SIGMAS * config.blob_sigma) ** 2
    budget = 0.6 * config.width * config.height
    if n_people * support > budget:
        raise ValueError(
            f"{n_people} people with blob_sigma={config.blob_sigma} exceed the "
            f"overlap budget for a {config.width}x{config.height} frame"
        )


def _reflect(value, vel, vmax):
    while value < 0 or value > vmax:
        if value < 0:
            value, vel = -value, -vel
        else:
            value, vel = 2 * vmax - value, -vel
    return value, vel


def simulate_trajectories(config: SynthSceneConfig, n_people: int, rng) -> list[Trajectory]:
    xmax, ymax = config.width - 1, config.height - 1
    trajectories = []
    for pid in range(n_people):
        x = rng.uniform(0, xmax)
        y = rng.uniform(0, ymax)
        speed = rng.uniform(*config.speed_range)
        angle = rng.uniform(0, 2 * math.pi)
        vx, vy = speed * math.cos(angle), speed * math.sin(angle)
        positions = [HeadPoint(x, y)]
        velocities = []
        for _ in range(config.n_frames - 1):
            velocities.append((vx, vy))
            x, vx = _reflect(x + vx, vx, xmax)
            y, vy = _reflect(y + vy, vy, ymax)
            positions.append(HeadPoint(x, y))
        trajectories.append(Trajectory(pid, positions, velocities))
    return trajectories


def _make_background(config: SynthSceneConfig, rng) -> np.ndarray:
    if config.background == "flat":
        return np.full((config.height, config.width), 0.2, dtype=np.float64)
    from scipy.ndimage import gaussian_filter

    field = gaussian_filter(rng.standard_normal((config.height, config.width)), sigma=3.0)
    span = field.max() - field.min()
    if span > 0:
        field = (field - field.min()) / span
    return 0.15 + 0.25 * field


def render_frame(positions, config: SynthSceneConfig, background=None, rng=None):
    """One frame: background + additive Gaussian blobs + optional noise."""
    if background is None:
        background = _make_background(config, np.random.Generator(np.random.PCG64(config.seed)))
    frame = background.astype(np.float64).copy()
    ys = np.arange(config.height, dtype=np.float64)[:, None]
    xs = np.arange(config.width, dtype=np.float64)[None, :]
    two_s2 = 2.0 * config.blob_sigma**2
    for p in positions:
        frame += BLOB_AMPLITUDE * np.exp(-((ys - p.y) ** 2 + (xs - p.x) ** 2) / two_s2)
    if rng is not None and config.noise_std > 0:
        frame += rng.normal(0.0, config.noise_std, size=frame.shape)
    return np.clip(frame, 0.0, 1.0)


def _gt_flow(trajectories, t, config: SynthSceneConfig) -> FlowField:
    h, w = config.height, config.width
    u = np.zeros((h, w))
    v = np.zeros((h, w))
    best = np.full((h, w), np.inf)
    radius = FLOW_SUPPORT_SIGMAS * config.blob_sigma
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    for traj in trajectories:
        p = traj.positions[t]
        dx, dy = traj.displacement(t)
        d2 = (ys - p.y) ** 2 + (xs - p.x) ** 2
        take = (d2 <= radius * radius) & (d2 < best)
        u[take] = dx
        v[take] = dy
        best[take] = d2[take]
    return FlowField(u, v)


def generate_clip(config: SynthSceneConfig):
    """Generate a full clip: (frames, ClipAnnotation, list of GT FlowFields).

    Frames are float grids in [0, 1]; flows[t] is the motion from frame t
    to frame t+1, supported within 2 blob sigmas of each head.
    """
    root_ss = np.random.SeedSequence(config.seed)
    traj_ss, bg_ss, noise_ss, distract_ss = root_ss.spawn(4)
    rng = np.random.Generator(np.random.PCG64(traj_ss))

    n_people = config.n_people
    if isinstance(n_people, tuple):
        lo, hi = n_people
        n_people = int(rng.integers(lo, hi + 1))

    drng = np.random.Generator(np.random.PCG64(distract_ss))
    n_distract = config.n_distractors
    if isinstance(n_distract, tuple):
        lo, hi = n_distract
        n_distract = int(drng.integers(lo, hi + 1))
    _check_overlap_budget(config, n_people + n_distract)

    trajectories = simulate_trajectories(config, n_people, rng)
    background = _make_background(config, np.random.Generator(np.random.PCG64(bg_ss)))
    if n_distract:
        # people-looking blobs baked into the scenery: present in every
        # frame, never annotated, zero flow
        spots = [
            HeadPoint(drng.uniform(0, config.width - 1), drng.uniform(0, config.height - 1))
            for _ in range(n_distract)
        ]
        background = render_frame(spots, config, background)

    frames = []
    annotations = []
    noise_children = noise_ss.spawn(config.n_frames)
    for t in range(config.n_frames):
        positions = [traj.positions[t] for traj in trajectories]
        frame_rng = np.random.Generator(np.random.PCG64(noise_children[t]))
        frames.append(render_frame(positions, config, background, frame_rng))
        annotations.append(
            FrameAnnotation(
                frame_index=t,
                image_path=f"frames/{t:06d}.png",
                heads=list(positions),
            )
        )

    flows = [_gt_flow(trajectories, t, config) for t in range(config.n_frames - 1)]
    clip = ClipAnnotation(
        clip_id=f"synth-{config.seed}",
        width=config.width,
        height=config.height,
        fps=10.0,
        frames=annotations,
    ).validate()
    return frames, clip, flows


def write_clip(out_dir, frames, clip: ClipAnnotation, flows):
    """Write the documented clip directory layout; returns written paths."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "flow").mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(frames):
        p = out / "frames" / f"{t:06d}.png"
        img = (np.clip(frame, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        Image.fromarray(img, mode="L").save(p)
        paths.append(p)
    for t, flow in enumerate(flows, start=1):
        p = out / "flow" / f"{t:06d}.flo2"
        flow.save(p)
        paths.append(p)
    ann = out / "annotation.json"
    save_clip(clip, ann)
    paths.append(ann)
    return paths


def load_clip_dir(clip_dir):
    """Load a clip directory back into (frames, ClipAnnotation, flows).

    Flow files are optional; flows is None when the directory has none.
    """
    clip_dir = Path(clip_dir)
    clip = load_clip(clip_dir / "annotation.json")
    frames = []
    for frame_ann in clip.frames:
        img = Image.open(clip_dir / frame_ann.image_path).convert("L")
        frames.append(np.asarray(img, dtype=np.float64) / 255.0)
    flow_dir = clip_dir / "flow"
    flows = None
    if flow_dir.is_dir():
        flows = []
        for t in range(1, len(clip.frames)):
            path = flow_dir / f"{t:06d}.flo2"
            if not path.exists():
                flows = None
                break
            flows.append(FlowField.load(path))
    return frames, clip, flows
