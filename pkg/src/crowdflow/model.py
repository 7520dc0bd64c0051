"""The counting network: shared frontend, non-local context blocks,
flow-guided segmentation head, guided residual refinement and density head.

Feature tensors are [batch, time, channels, height, width]; the frontend
applies the same weights to every frame and reduces spatial resolution by
``output_stride`` (2 per pooling stage). Density and guidance maps come
out at that reduced resolution, one per-frame map for the current frame.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1

# Truncated VGG-16-style plan: convs per stage, pools between stages.
_STAGE_CONVS = (2, 2, 3, 3, 3)


class CheckpointError(ValueError):
    """Raised when a checkpoint fails shape or format validation."""


@dataclass
class ModelConfig:
    in_channels: int = 1
    backbone_channels: tuple = (64, 128, 256, 512)
    n_pool: int = 3
    nl_bottleneck_ratio: float = 0.5
    temporal_window: int = 2
    lambda_seg: float = 1.0
    seg_radius: float = 15.0
    n_refine_blocks: int = 2
    use_nonlocal: bool = True
    use_guidance: bool = True
    nonlocal_order: str = "spatial_first"

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.temporal_window < 2:
            raise ValueError("temporal_window must be >= 2")
        if not (0 < self.nl_bottleneck_ratio <= 1):
            raise ValueError("nl_bottleneck_ratio must be in (0, 1]")
        if self.lambda_seg < 0:
            raise ValueError("lambda_seg must be >= 0")
        if len(self.backbone_channels) != self.n_pool + 1:
            raise ValueError(
                f"backbone_channels needs {self.n_pool + 1} stages for "
                f"{self.n_pool} pooling layers"
            )
        if self.nonlocal_order not in ("spatial_first", "temporal_first"):
            raise ValueError(f"unknown nonlocal_order {self.nonlocal_order!r}")

    @property
    def output_stride(self) -> int:
        return 2**self.n_pool

    @property
    def feature_channels(self) -> int:
        return self.backbone_channels[-1]


def _check_finite(x: torch.Tensor, what: str):
    if not torch.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite values")


class Frontend(nn.Module):
    """Truncated VGG-style encoder applied frame-by-frame with shared weights."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        layers = []
        c_in = config.in_channels
        n_stages = config.n_pool + 1
        for stage in range(n_stages):
            c_out = config.backbone_channels[stage]
            for _ in range(_STAGE_CONVS[stage]):
                layers.append(nn.Conv2d(c_in, c_out, 3, padding=1))
                layers.append(nn.ReLU(inplace=True))
                c_in = c_out
            if stage < config.n_pool:
                layers.append(nn.MaxPool2d(2))
        self.features = nn.Sequential(*layers)
        self.stride = config.output_stride

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 5:
            raise ValueError(f"expected [B, T, C, H, W] frames, got {tuple(frames.shape)}")
        b, t, c, h, w = frames.shape
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"frame size {h}x{w} not divisible by output stride {self.stride}"
            )
        out = self.features(frames.reshape(b * t, c, h, w))
        return out.reshape(b, t, out.shape[1], out.shape[2], out.shape[3])


class NonLocalBlock(nn.Module):
    """Self-attention over positions: within each frame ("spatial" mode) or
    jointly over all frames ("temporal" mode).

    Output position i is the affinity-weighted sum over all positions j,
    with softmax(theta(x_i) . phi(x_j)) affinities, projected back and
    added residually to the input.
    """

    def __init__(self, channels: int, mode: str, bottleneck_ratio: float = 0.5):
        super().__init__()
        if mode not in ("spatial", "temporal"):
            raise ValueError(f"unknown non-local mode {mode!r}")
        self.mode = mode
        inner = max(1, int(round(channels * bottleneck_ratio)))
        self.theta = nn.Conv2d(channels, inner, 1)
        self.phi = nn.Conv2d(channels, inner, 1)
        self.g = nn.Conv2d(channels, inner, 1)
        self.wz = nn.Conv2d(inner, channels, 1)
        self.inner = inner

    def affinity(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax affinity rows, [N, positions, positions]; rows sum to 1."""
        th, ph, _ = self._projections(x)
        return torch.softmax(th.transpose(1, 2) @ ph, dim=-1)

    def _projections(self, x):
        b, t, c, h, w = x.shape
        flat = x.reshape(b * t, c, h, w)
        th = self.theta(flat).reshape(b, t, self.inner, h * w)
        ph = self.phi(flat).reshape(b, t, self.inner, h * w)
        g = self.g(flat).reshape(b, t, self.inner, h * w)
        if self.mode == "spatial":
            # attend over H*W within each frame
            th = th.reshape(b * t, self.inner, h * w)
            ph = ph.reshape(b * t, self.inner, h * w)
            g = g.reshape(b * t, self.inner, h * w)
        else:
            # attend over T*H*W jointly
            th = th.permute(0, 2, 1, 3).reshape(b, self.inner, t * h * w)
            ph = ph.permute(0, 2, 1, 3).reshape(b, self.inner, t * h * w)
            g = g.permute(0, 2, 1, 3).reshape(b, self.inner, t * h * w)
        return th, ph, g

    def core(self, x: torch.Tensor) -> torch.Tensor:
        """Attention output y before the output projection and residual."""
        b, t, c, h, w = x.shape
        th, ph, g = self._projections(x)
        attn = torch.softmax(th.transpose(1, 2) @ ph, dim=-1)
        y = attn @ g.transpose(1, 2)  # [N, positions, inner]
        if self.mode == "spatial":
            return y.transpose(1, 2).reshape(b, t, self.inner, h, w)
        return y.transpose(1, 2).reshape(b, self.inner, t, h, w).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 4  # [T, C, H, W] treated as batch of 1
        if squeeze:
            x = x.unsqueeze(0)
        _check_finite(x, "non-local input")
        b, t, c, h, w = x.shape
        y = self.core(x)
        z = self.wz(y.reshape(b * t, self.inner, h, w)).reshape(b, t, c, h, w) + x
        return z.squeeze(0) if squeeze else z


class SegmentationHead(nn.Module):
    """Coarse people-region probability from features + flow prior."""

    def __init__(self, feature_channels: int):
        super().__init__()
        hidden = max(feature_channels // 2, 4)
        self.conv1 = nn.Conv2d(feature_channels + 1, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, 1, 1)

    def forward(self, features: torch.Tensor, flow_prior: torch.Tensor) -> torch.Tensor:
        if features.shape[-2:] != flow_prior.shape[-2:]:
            raise ValueError(
                f"flow prior {tuple(flow_prior.shape[-2:])} does not match "
                f"features {tuple(features.shape[-2:])}"
            )
        x = torch.cat([features, flow_prior], dim=1)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return torch.sigmoid(self.out(x))


class ResidualAttentionBlock(nn.Module):
    """Residual refinement gated spatially by guidance and channel-wise by
    globally pooled features: out = x + branch(x) * A_s(guidance) * A_c(x)."""

    def __init__(self, channels: int):
        super().__init__()
        self.branch = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        self.spatial_gate = nn.Conv2d(1, 1, 3, padding=1)
        self.channel_gate = nn.Linear(channels, channels)

    def forward(self, features: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        if features.shape[-2:] != guidance.shape[-2:]:
            raise ValueError(
                f"guidance {tuple(guidance.shape[-2:])} does not match "
                f"features {tuple(features.shape[-2:])}"
            )
        a_s = torch.sigmoid(self.spatial_gate(guidance))  # [B, 1, h, w]
        pooled = features.mean(dim=(2, 3))
        a_c = torch.sigmoid(self.channel_gate(pooled))[:, :, None, None]
        return features + self.branch(features) * a_s * a_c


class Backend(nn.Module):
    """Dilated conv stack regressing a non-negative density map."""

    def __init__(self, feature_channels: int):
        super().__init__()
        c1 = max(feature_channels // 2, 4)
        c2 = max(feature_channels // 4, 2)
        self.conv1 = nn.Conv2d(feature_channels, c1, 3, padding=2, dilation=2)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=2, dilation=2)
        self.out = nn.Conv2d(c2, 1, 1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(features))
        x = F.relu(self.conv2(x))
        return F.relu(self.out(x))


class CountingNetwork(nn.Module):
    """Full pipeline: frontend -> non-local context -> guidance -> guided
    refinement -> density. Returns (density, guidance) for the current
    (last) frame; guidance is None when the guidance stage is disabled.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.feature_channels
        self.frontend = Frontend(config)
        if config.use_nonlocal:
            self.nl_spatial = NonLocalBlock(c, "spatial", config.nl_bottleneck_ratio)
            self.nl_temporal = NonLocalBlock(c, "temporal", config.nl_bottleneck_ratio)
        if config.use_guidance:
            self.seg_head = SegmentationHead(c)
            self.refine = nn.ModuleList(
                ResidualAttentionBlock(c) for _ in range(config.n_refine_blocks)
            )
        self.backend = Backend(c)

    def forward(self, frames: torch.Tensor, flow_prior: torch.Tensor | None = None):
        if frames.dim() == 4:
            frames = frames.unsqueeze(0)
        if frames.shape[1] != self.config.temporal_window:
            raise ValueError(
                f"expected {self.config.temporal_window} frames, got {frames.shape[1]}"
            )
        _check_finite(frames, "input frames")
        feats = self.frontend(frames)
        if self.config.use_nonlocal:
            if self.config.nonlocal_order == "spatial_first":
                feats = self.nl_temporal(self.nl_spatial(feats))
            else:
                feats = self.nl_spatial(self.nl_temporal(feats))
        current = feats[:, -1]

        guidance = None
        if self.config.use_guidance:
            if flow_prior is None:
                raise ValueError("guidance stage enabled but no flow prior given")
            if flow_prior.dim() == 3:
                flow_prior = flow_prior.unsqueeze(0)
            guidance = self.seg_head(current, flow_prior)
            for block in self.refine:
                current = block(current, guidance)

        density = self.backend(current)
        _check_finite(density, "predicted density")
        return density, guidance


def init_weights(model: nn.Module):
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
    for m in model.modules():
        if isinstance(m, NonLocalBlock):
            # Zero output projection starts the block as an identity; the
            # attention path fades in as wz trains.
            nn.init.zeros_(m.wz.weight)
            nn.init.zeros_(m.wz.bias)
        elif isinstance(m, Backend):
            # Small weights and a small positive bias start the rectified
            # density head near a flat low map instead of overshooting it
            # into the dead zero region.
            for conv in (m.conv1, m.conv2, m.out):
                nn.init.normal_(conv.weight, std=0.01)
                nn.init.zeros_(conv.bias)
            nn.init.constant_(m.out.bias, 0.1)
    return model


def build_model(config: ModelConfig, seed: int | None = None) -> CountingNetwork:
    if seed is not None:
        torch.manual_seed(seed)
    return init_weights(CountingNetwork(config))


def flow_prior_tensor(flow, stride: int, tau: float = 1.0, tau_scale: float = 0.25):
    """Soft motion prior from a FlowField, average-pooled to feature resolution."""
    from .flow import flow_magnitude_prior

    prior = flow_magnitude_prior(flow, tau=tau, tau_scale=tau_scale)
    t = torch.as_tensor(prior, dtype=torch.float32)[None, None]
    return F.avg_pool2d(t, stride)[0]


def predict_density(model: CountingNetwork, frames, flow=None):
    """Run the network on numpy frames (list of [H, W] grids in [0, 1]).

    Returns (density, guidance) numpy maps at output-stride resolution;
    guidance is None for configs without the guidance stage.
    """
    config = model.config
    stack = np.stack([np.asarray(f, dtype=np.float32) for f in frames])
    x = torch.from_numpy(stack)[None, :, None]  # [1, T, 1, H, W]
    prior = None
    if config.use_guidance:
        if flow is None:
            raise ValueError("this model needs a flow field for its guidance stage")
        prior = flow_prior_tensor(flow, config.output_stride).unsqueeze(0)
        prior = prior.to(x.dtype)
    model.eval()
    with torch.no_grad():
        density, guidance = model(x, prior)
    density_np = density[0, 0].numpy().astype(np.float64)
    guidance_np = None if guidance is None else guidance[0, 0].numpy().astype(np.float64)
    return density_np, guidance_np


def save_checkpoint(model: CountingNetwork, path):
    """Keyed float32 weight archive with the model config embedded.

    Layout: magic, version, u32 header length, canonical-JSON header
    (config + ordered tensor index), then raw little-endian float32 data.
    """
    state = model.state_dict()
    tensors = [
        {"name": name, "shape": list(t.shape)} for name, t in state.items()
    ]
    header = json.dumps(
        {"config": asdict(model.config), "tensors": tensors},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for name in state:
            f.write(state[name].detach().cpu().numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> CountingNetwork:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        config = ModelConfig(**header["config"])
        model = CountingNetwork(config)
        expected = model.state_dict()
        listed = {entry["name"]: tuple(entry["shape"]) for entry in header["tensors"]}
        missing = set(expected) - set(listed)
        extra = set(listed) - set(expected)
        if missing or extra:
            raise CheckpointError(
                f"{path}: key mismatch (missing {sorted(missing)}, extra {sorted(extra)})"
            )
        new_state = {}
        for entry in header["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if shape != tuple(expected[name].shape):
                raise CheckpointError(
                    f"{path}: {name} has shape {shape}, expected "
                    f"{tuple(expected[name].shape)}"
                )
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(n * 4)
            if len(raw) != n * 4:
                raise CheckpointError(f"{path}: truncated data for {name}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            new_state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(new_state)
    return model
