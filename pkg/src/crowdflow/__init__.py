"""Motion-guided non-local video crowd counting."""

from .annotations import AnnotationError, ClipAnnotation, FrameAnnotation, HeadPoint
from .flow import FlowEstimatorSpec, FlowField, estimate_flow, flow_magnitude_prior
from .ground_truth import (
    KernelSpec,
    count_from_density,
    render_density,
    render_segmentation,
)
from .losses import EvalReport, LossBreakdown, density_loss, evaluate, seg_bce_loss, total_loss
from .model import (
    CountingNetwork,
    ModelConfig,
    NonLocalBlock,
    build_model,
    load_checkpoint,
    predict_density,
    save_checkpoint,
)
from .synth import SynthSceneConfig, generate_clip, load_clip_dir, write_clip
from .training import (
    Sample,
    TrainConfig,
    ablation_config,
    evaluate_dataset,
    fit,
    samples_from_clip,
    segmentation_iou,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationError",
    "ClipAnnotation",
    "CountingNetwork",
    "EvalReport",
    "FlowEstimatorSpec",
    "FlowField",
    "FrameAnnotation",
    "HeadPoint",
    "KernelSpec",
    "LossBreakdown",
    "ModelConfig",
    "NonLocalBlock",
    "Sample",
    "SynthSceneConfig",
    "TrainConfig",
    "ablation_config",
    "build_model",
    "count_from_density",
    "density_loss",
    "estimate_flow",
    "evaluate",
    "evaluate_dataset",
    "fit",
    "flow_magnitude_prior",
    "generate_clip",
    "load_checkpoint",
    "load_clip_dir",
    "predict_density",
    "render_density",
    "render_segmentation",
    "samples_from_clip",
    "save_checkpoint",
    "seg_bce_loss",
    "segmentation_iou",
    "total_loss",
    "write_clip",
]
