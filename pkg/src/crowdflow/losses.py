"""Fused training objective (density + weighted segmentation) and count metrics.

The density term is the pixel-mean squared error between predicted and
ground-truth density maps; the segmentation term is pixel-mean binary
cross entropy on the coarse people mask. Counting quality is reported as
MAE and MSE over per-frame counts, where MSE is the root of the mean
squared count error.
"""

import json
from dataclasses import dataclass

import torch

# Probability clamp keeping log() finite in the BCE term.
BCE_EPS = 1e-7


def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def density_loss(pred, gt) -> torch.Tensor:
    """Mean over pixels of the squared density error."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return ((pred - gt) ** 2).mean()


def seg_bce_loss(pred, gt) -> torch.Tensor:
    """Mean binary cross entropy of the soft mask against the hard mask."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p)).mean()


@dataclass
class LossBreakdown:
    l_den: object
    l_seg: object
    l_total: object
    lambda_seg: float

    def to_dict(self) -> dict:
        return {
            "l_den": float(self.l_den),
            "l_seg": float(self.l_seg),
            "l_total": float(self.l_total),
            "lambda_seg": float(self.lambda_seg),
        }


def total_loss(l_den, l_seg, lambda_seg: float) -> LossBreakdown:
    """Combine the two terms: l_total = l_den + lambda_seg * l_seg."""
    if lambda_seg < 0:
        raise ValueError("lambda_seg must be >= 0")
    return LossBreakdown(l_den, l_seg, l_den + lambda_seg * l_seg, lambda_seg)


@dataclass
class EvalReport:
    mae: float
    mse: float
    per_frame: list[tuple[float, float]]

    @property
    def n(self) -> int:
        return len(self.per_frame)

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "mse": self.mse,
            "n": self.n,
            "per_frame": [[float(g), float(p)] for g, p in self.per_frame],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(pairs) -> EvalReport:
    """Count metrics over (ground truth, predicted) per-frame count pairs.

    MAE is the mean absolute count error; MSE is the root of the mean
    squared count error, so MSE >= MAE always holds.
    """
    pairs = [(float(g), float(p)) for g, p in pairs]
    if not pairs:
        raise ValueError("evaluate needs at least one (gt, pred) pair")
    errors = [abs(g - p) for g, p in pairs]
    mae = sum(errors) / len(errors)
    mse = (sum(e * e for e in errors) / len(errors)) ** 0.5
    return EvalReport(mae=mae, mse=mse, per_frame=pairs)
