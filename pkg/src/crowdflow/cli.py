"""Command line interface.

Subcommands cover the full pipeline: synthesize a clip, render ground
truth, estimate flow, train, evaluate and run single-frame inference.
Every command accepts --json for machine-readable output; usage and
file errors exit with status 2.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import formats
from .annotations import AnnotationError, load_clip
from .flow import FlowEstimatorSpec, estimate_flow, flow_color_encode
from .ground_truth import KernelSpec, render_density, render_segmentation
from .model import load_checkpoint, predict_density
from .synth import SynthSceneConfig, generate_clip, load_clip_dir, write_clip
from .training import (
    TrainConfig,
    ablation_config,
    build_model,
    evaluate_dataset,
    fit,
    model_config_from_dict,
    samples_from_clip,
    segmentation_iou,
    train_config_from_dict,
)

USAGE_ERROR = 2


def _kernel_from_args(args) -> KernelSpec:
    return KernelSpec(
        mode=args.kernel,
        sigma=args.sigma,
        beta=args.beta,
        k=args.k,
        fallback_sigma=args.sigma,
    )


def _flow_spec_from_args(args) -> FlowEstimatorSpec:
    return FlowEstimatorSpec(
        backend=args.backend,
        block_size=args.block_size,
        search_radius=args.search_radius,
    )


def _emit(payload: dict, as_json: bool):
    if as_json:
        print(json.dumps(payload, sort_keys=True, indent=2))
    else:
        for key, value in payload.items():
            print(f"{key}: {value}")


def _count_or_range(text: str):
    if ":" in text:
        lo, hi = text.split(":", 1)
        return (int(lo), int(hi))
    return int(text)


def cmd_synth(args) -> int:
    config = SynthSceneConfig(
        width=args.width, height=args.height, n_frames=args.frames,
        n_people=_count_or_range(args.people), blob_sigma=args.blob_sigma,
        background=args.background, noise_std=args.noise_std, seed=args.seed,
        n_distractors=_count_or_range(args.distractors),
    )
    frames, clip, flows = generate_clip(config)
    write_clip(args.out, frames, clip, flows)
    total = sum(len(f.heads) for f in clip.frames)
    _emit({
        "out": str(args.out), "clip_id": clip.clip_id,
        "frames": len(frames), "heads_total": total,
    }, args.json)
    return 0


def cmd_gen_gt(args) -> int:
    clip = load_clip(args.annotations)
    kernel = _kernel_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = []
    for frame in clip.frames:
        density = render_density(frame, kernel, width=clip.width, height=clip.height)
        mask = render_segmentation(frame, args.seg_radius,
                                   width=clip.width, height=clip.height)
        formats.write_density(out / f"{frame.frame_index:06d}.dmap", density)
        formats.write_mask(out / f"{frame.frame_index:06d}.smsk", mask)
        counts.append(round(float(density.sum()), 6))
    _emit({
        "out": str(out), "frames": len(clip.frames),
        "kernel": kernel.mode, "counts": counts,
    }, args.json)
    return 0


def cmd_flow(args) -> int:
    frames, clip, gt_flows = load_clip_dir(args.clip)
    spec = _flow_spec_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for t in range(1, len(frames)):
        gt = gt_flows[t - 1] if gt_flows is not None else None
        flow = estimate_flow(frames[t - 1], frames[t], spec, gt_flow=gt)
        flow.save(out / f"{t:06d}.flo2")
        if args.png:
            from PIL import Image

            Image.fromarray(flow_color_encode(flow)).save(out / f"{t:06d}.png")
        written += 1
    _emit({"out": str(out), "flows": written, "backend": spec.backend}, args.json)
    return 0


def _load_samples(data_dir, kernel, seg_radius, flow_spec):
    frames, clip, flows = load_clip_dir(data_dir)
    if flows is None:
        flows = [
            estimate_flow(frames[t - 1], frames[t], flow_spec)
            for t in range(1, len(frames))
        ]
    return samples_from_clip(frames, clip, flows, kernel, seg_radius)


def cmd_train(args) -> int:
    kernel = _kernel_from_args(args)
    flow_spec = _flow_spec_from_args(args)
    samples = []
    for data_dir in args.data:
        samples.extend(_load_samples(data_dir, kernel, args.seg_radius, flow_spec))

    model_overrides = {}
    if args.model_config:
        model_overrides = json.loads(Path(args.model_config).read_text())
        model_config_from_dict(model_overrides)  # reject unknown keys early
    model = build_model(ablation_config(args.mode, **model_overrides), seed=args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_dict = {}
    if args.train_config:
        train_dict = json.loads(Path(args.train_config).read_text())
    train_dict.setdefault("lr", args.lr)
    train_dict.setdefault("batch_size", args.batch)
    train_dict.setdefault("n_steps", args.steps)
    train_dict.setdefault("seed", args.seed)
    train_dict.setdefault("deterministic", args.deterministic)
    train_dict.setdefault("log_path", str(out / "train_log.jsonl"))
    train_dict.setdefault("checkpoint_path", str(out / "model.ckpt"))
    config = train_config_from_dict(train_dict)

    fit(model, samples, config)
    report = evaluate_dataset(model, samples)
    payload = {
        "checkpoint": config.checkpoint_path, "log": config.log_path,
        "mode": args.mode, "steps": config.n_steps,
        "train_mae": round(report.mae, 6), "train_mse": round(report.mse, 6),
    }
    if model.config.use_guidance:
        payload["train_seg_iou"] = round(segmentation_iou(model, samples), 6)
    _emit(payload, args.json)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    kernel = _kernel_from_args(args)
    flow_spec = _flow_spec_from_args(args)
    samples = []
    for data_dir in args.data:
        samples.extend(_load_samples(data_dir, kernel, args.seg_radius, flow_spec))
    report = evaluate_dataset(model, samples)
    _emit(json.loads(report.to_json()), args.json)
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    frames, clip, gt_flows = load_clip_dir(args.clip)
    t = args.frame if args.frame is not None else len(frames) - 1
    window = model.config.temporal_window
    if not (window - 1 <= t < len(frames)):
        raise ValueError(f"frame {t} out of range for window {window}")
    flow = None
    if model.config.use_guidance:
        if gt_flows is not None:
            flow = gt_flows[t - 1]
        else:
            flow = estimate_flow(frames[t - 1], frames[t], _flow_spec_from_args(args))
    window_frames = [frames[i] for i in range(t - window + 1, t + 1)]
    density, guidance = predict_density(model, window_frames, flow)
    payload = {"frame": t, "count": round(float(density.sum()), 6)}
    if args.out:
        formats.write_density(args.out, density)
        payload["density"] = str(args.out)
    if args.plot:
        _plot_overlay(frames[t], density, guidance, args.plot)
        payload["plot"] = str(args.plot)
    _emit(payload, args.json)
    return 0


def _plot_overlay(frame, density, guidance, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n_axes = 2 if guidance is None else 3
    fig, axes = plt.subplots(1, n_axes, figsize=(4 * n_axes, 4))
    axes[0].imshow(frame, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("frame")
    h, w = frame.shape
    upscaled = np.kron(density, np.ones((h // density.shape[0], w // density.shape[1])))
    axes[1].imshow(frame, cmap="gray", vmin=0, vmax=1)
    axes[1].imshow(upscaled, cmap="jet", alpha=0.5)
    axes[1].set_title(f"density (count {density.sum():.2f})")
    if guidance is not None:
        axes[2].imshow(guidance, cmap="viridis", vmin=0, vmax=1)
        axes[2].set_title("guidance")
    for ax in axes:
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _add_kernel_args(p: argparse.ArgumentParser):
    p.add_argument("--kernel", choices=["fixed", "adaptive"], default="fixed")
    p.add_argument("--sigma", type=float, default=4.0,
                   help="fixed kernel width, also the adaptive fallback")
    p.add_argument("--beta", type=float, default=0.3,
                   help="adaptive width as a fraction of mean neighbor distance")
    p.add_argument("--k", type=int, default=3, help="neighbors for adaptive width")
    p.add_argument("--seg-radius", type=float, default=6.0,
                   help="disc radius for the people mask")


def _add_flow_args(p: argparse.ArgumentParser):
    p.add_argument("--backend", choices=["block_matching", "oracle"],
                   default="block_matching")
    p.add_argument("--block-size", type=int, default=9)
    p.add_argument("--search-radius", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdflow",
        description="Motion-guided video crowd counting pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clip with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--people", default="8", help="count or LO:HI range")
    p.add_argument("--blob-sigma", type=float, default=2.0)
    p.add_argument("--background", choices=["flat", "textured"], default="flat")
    p.add_argument("--noise-std", type=float, default=0.01)
    p.add_argument("--distractors", default="0", metavar="N",
                   help="static people-looking blobs left out of the "
                        "annotations; count or LO:HI range")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gen-gt", help="render density maps and people masks")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    _add_kernel_args(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gen_gt)

    p = sub.add_parser("flow", help="estimate flow between consecutive frames")
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    _add_flow_args(p)
    p.add_argument("--png", action="store_true", help="also write color-coded flow")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("train", help="train a counting model on clip directories")
    p.add_argument("--data", action="append", required=True,
                   help="clip directory, repeatable")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["baseline", "nonlocal", "motion_guided"],
                   default="motion_guided")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--model-config", help="JSON file with model overrides")
    p.add_argument("--train-config", help="JSON file with training settings")
    _add_kernel_args(p)
    _add_flow_args(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on clip directories")
    p.add_argument("--data", action="append", required=True)
    p.add_argument("--checkpoint", required=True)
    _add_kernel_args(p)
    _add_flow_args(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a density map for one frame")
    p.add_argument("--clip", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--out", help="write the predicted density map here")
    p.add_argument("--plot", help="write a PNG overlay here")
    _add_flow_args(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_infer)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, AnnotationError, formats.FormatError, ValueError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
