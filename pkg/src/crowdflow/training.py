"""Training and evaluation loops.

Samples pair consecutive frames with per-frame ground truth (density map,
people mask, flow into the current frame). Augmentation applies one shared
transform to frames and all targets; ground truth is downsampled to the
network's output stride just before the loss (sum-pooling keeps density
counts exact, max-pooling keeps mask presence).
"""

import json
import math
from dataclasses import dataclass, fields

import numpy as np
import torch

from .flow import FlowField, flow_magnitude_prior
from .ground_truth import KernelSpec, render_density, render_segmentation
from .losses import EvalReport, LossBreakdown, density_loss, evaluate, seg_bce_loss, total_loss
from .model import CountingNetwork, ModelConfig, build_model, save_checkpoint

ABLATION_MODES = ("baseline", "nonlocal", "motion_guided")


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 8
    n_steps: int = 2000
    seed: int = 0
    augment: bool = True
    crop_size: int | None = None
    flip_prob: float = 0.5
    eval_every: int = 100
    deterministic: bool = True
    log_path: str | None = None
    checkpoint_path: str | None = None
    # optional early stop, checked at eval points; training stops once
    # every configured target is met
    stop_mae: float | None = None
    stop_iou: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.n_steps < 1:
            raise ValueError("batch_size and n_steps must be >= 1")
        if not (0 <= self.flip_prob <= 1):
            raise ValueError("flip_prob must be in [0, 1]")


@dataclass
class Sample:
    """One training example: T stacked frames plus current-frame targets."""

    frames: np.ndarray  # [T, H, W] float32 in [0, 1]
    density: np.ndarray  # [H, W] float64
    mask: np.ndarray  # [H, W] float64 in {0, 1}
    flow_u: np.ndarray  # [H, W] float64
    flow_v: np.ndarray  # [H, W] float64


def _config_from_dict(cls, data: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**data)


def train_config_from_dict(data: dict) -> TrainConfig:
    return _config_from_dict(TrainConfig, data, "training config")


def model_config_from_dict(data: dict) -> ModelConfig:
    return _config_from_dict(ModelConfig, data, "model config")


def ablation_config(mode: str, **overrides) -> ModelConfig:
    """Model config for one ablation arm: bare backbone, + non-local
    context, or the full motion-guided pipeline."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}, pick from {ABLATION_MODES}")
    flags = {
        "baseline": dict(use_nonlocal=False, use_guidance=False),
        "nonlocal": dict(use_nonlocal=True, use_guidance=False),
        "motion_guided": dict(use_nonlocal=True, use_guidance=True),
    }[mode]
    return ModelConfig(**{**flags, **overrides})


def samples_from_clip(frames, clip, flows, kernel: KernelSpec, seg_radius: float,
                      window: int = 2):
    """Sliding-window samples over a clip; targets belong to the last frame
    of each window. flows[i] is the flow into frame i + 1."""
    if len(flows) != len(frames) - 1:
        raise ValueError(
            f"need {len(frames) - 1} flow fields for {len(frames)} frames, "
            f"got {len(flows)}"
        )
    h, w = frames[0].shape
    samples = []
    for t in range(window - 1, len(frames)):
        frame_ann = clip.frames[t]
        density = render_density(frame_ann, kernel, width=w, height=h)
        mask = render_segmentation(frame_ann, seg_radius, width=w, height=h)
        flow = flows[t - 1]
        samples.append(Sample(
            frames=np.stack([np.asarray(frames[i], dtype=np.float32)
                             for i in range(t - window + 1, t + 1)]),
            density=density,
            mask=mask,
            flow_u=flow.u.copy(),
            flow_v=flow.v.copy(),
        ))
    return samples


def downsample_density(density: np.ndarray, stride: int) -> np.ndarray:
    """Sum-pool so the map keeps its total count exactly."""
    h, w = density.shape
    if h % stride or w % stride:
        raise ValueError(f"density {h}x{w} not divisible by stride {stride}")
    return density.reshape(h // stride, stride, w // stride, stride).sum(axis=(1, 3))


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Max-pool so any covered pixel keeps the cell positive."""
    h, w = mask.shape
    if h % stride or w % stride:
        raise ValueError(f"mask {h}x{w} not divisible by stride {stride}")
    return mask.reshape(h // stride, stride, w // stride, stride).max(axis=(1, 3))


def downsample_prior(prior: np.ndarray, stride: int) -> np.ndarray:
    h, w = prior.shape
    if h % stride or w % stride:
        raise ValueError(f"prior {h}x{w} not divisible by stride {stride}")
    return prior.reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3))


def augment_sample(sample: Sample, rng: np.random.Generator,
                   crop_size: int | None = None,
                   flip_prob: float = 0.5) -> Sample:
    """One shared random flip + crop across frames, targets and flow.

    A horizontal flip negates the flow's x component and mirrors both
    components, so the flipped flow still points where people move.
    """
    frames, density, mask = sample.frames, sample.density, sample.mask
    u, v = sample.flow_u, sample.flow_v
    h, w = density.shape
    if crop_size is not None:
        if crop_size > h or crop_size > w:
            raise ValueError(f"crop {crop_size} larger than frame {h}x{w}")
        y0 = int(rng.integers(0, h - crop_size + 1))
        x0 = int(rng.integers(0, w - crop_size + 1))
        sl = np.s_[y0:y0 + crop_size, x0:x0 + crop_size]
        frames = frames[:, sl[0], sl[1]]
        density, mask, u, v = density[sl], mask[sl], u[sl], v[sl]
    if rng.random() < flip_prob:
        frames = frames[:, :, ::-1]
        density = density[:, ::-1]
        mask = mask[:, ::-1]
        u = -u[:, ::-1]
        v = v[:, ::-1]
    return Sample(
        frames=np.ascontiguousarray(frames),
        density=np.ascontiguousarray(density),
        mask=np.ascontiguousarray(mask),
        flow_u=np.ascontiguousarray(u),
        flow_v=np.ascontiguousarray(v),
    )


def _batch_tensors(samples, stride: int):
    """Stack samples into network inputs and stride-resolution targets."""
    frames = torch.from_numpy(np.stack([s.frames for s in samples]))[:, :, None]
    priors, densities, masks = [], [], []
    for s in samples:
        prior = flow_magnitude_prior(FlowField(s.flow_u, s.flow_v))
        priors.append(downsample_prior(prior, stride))
        densities.append(downsample_density(s.density, stride))
        masks.append(downsample_mask(s.mask, stride))
    prior_t = torch.from_numpy(np.stack(priors).astype(np.float32))[:, None]
    den_t = torch.from_numpy(np.stack(densities))[:, None]
    mask_t = torch.from_numpy(np.stack(masks))[:, None]
    return frames, prior_t, den_t, mask_t


def train_step(model: CountingNetwork, optimizer, samples,
               lambda_seg: float, step: int = 0) -> LossBreakdown:
    model.train()
    stride = model.config.output_stride
    frames, prior, den_gt, mask_gt = _batch_tensors(samples, stride)
    optimizer.zero_grad()
    density, guidance = model(frames, prior if model.config.use_guidance else None)
    l_den = density_loss(density, den_gt)
    if guidance is not None:
        l_seg = seg_bce_loss(guidance, mask_gt)
    else:
        l_seg = torch.zeros((), dtype=torch.float64)
    breakdown = total_loss(l_den, l_seg, lambda_seg)
    loss = breakdown.l_total
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss at step {step}: "
            f"l_den={float(l_den):g} l_seg={float(l_seg):g}"
        )
    loss.backward()
    optimizer.step()
    return LossBreakdown(
        l_den=float(l_den.detach()), l_seg=float(l_seg.detach()),
        l_total=float(loss.detach()), lambda_seg=lambda_seg,
    )


def set_deterministic(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _targets_met(model, samples, report, config: TrainConfig) -> bool:
    if config.stop_mae is None and config.stop_iou is None:
        return False
    if config.stop_mae is not None and report.mae >= config.stop_mae:
        return False
    if config.stop_iou is not None:
        if segmentation_iou(model, samples) < config.stop_iou:
            return False
    return True


def fit(model: CountingNetwork, train_samples, config: TrainConfig,
        eval_samples=None):
    """Adam training over shuffled mini-batches.

    Returns the history of logged records; writes them as JSON lines when
    config.log_path is set, and keeps the best-MAE checkpoint when
    config.checkpoint_path is set (final weights if evaluation never ran).
    """
    if not train_samples:
        raise ValueError("no training samples")
    if config.deterministic:
        set_deterministic(config.seed)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([config.seed, 0x7261494E])))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    lambda_seg = model.config.lambda_seg

    history = []
    log_file = open(config.log_path, "w") if config.log_path else None
    best_mae = math.inf
    done = False
    try:
        step = 0
        while step < config.n_steps and not done:
            order = rng.permutation(len(train_samples))
            for start in range(0, len(order), config.batch_size):
                if step >= config.n_steps:
                    break
                idx = order[start:start + config.batch_size]
                batch = [train_samples[i] for i in idx]
                if config.augment:
                    batch = [
                        augment_sample(s, rng, config.crop_size, config.flip_prob)
                        for s in batch
                    ]
                breakdown = train_step(model, optimizer, batch, lambda_seg, step)
                step += 1
                record = {"step": step, **breakdown.to_dict()}
                if step % config.eval_every == 0 or step == config.n_steps:
                    report = evaluate_dataset(model, eval_samples or train_samples)
                    record["mae"] = report.mae
                    record["mse"] = report.mse
                    if report.mae < best_mae:
                        best_mae = report.mae
                        if config.checkpoint_path:
                            save_checkpoint(model, config.checkpoint_path)
                    done = _targets_met(model, eval_samples or train_samples,
                                        report, config)
                    if done:
                        record["stopped"] = True
                history.append(record)
                if log_file:
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
                if done:
                    break
    finally:
        if log_file:
            log_file.close()
    if config.checkpoint_path and not math.isfinite(best_mae):
        save_checkpoint(model, config.checkpoint_path)
    return history


def evaluate_dataset(model: CountingNetwork, samples) -> EvalReport:
    """Count error over samples; predicted count is the density-map sum."""
    model.eval()
    stride = model.config.output_stride
    pairs = []
    with torch.no_grad():
        for s in samples:
            frames, prior, _, _ = _batch_tensors([s], stride)
            density, _ = model(frames, prior if model.config.use_guidance else None)
            pairs.append((float(s.density.sum()), float(density.sum())))
    return evaluate(pairs)


def segmentation_iou(model: CountingNetwork, samples, threshold: float = 0.5) -> float:
    """Mean IoU of thresholded guidance against the people mask."""
    if not model.config.use_guidance:
        raise ValueError("model has no guidance stage to score")
    model.eval()
    stride = model.config.output_stride
    scores = []
    with torch.no_grad():
        for s in samples:
            frames, prior, _, mask_gt = _batch_tensors([s], stride)
            _, guidance = model(frames, prior)
            pred = guidance[0, 0].numpy() >= threshold
            gt = mask_gt[0, 0].numpy() >= 0.5
            union = np.logical_or(pred, gt).sum()
            if union == 0:
                scores.append(1.0)
            else:
                scores.append(float(np.logical_and(pred, gt).sum() / union))
    return float(np.mean(scores))
