"""Clip annotations: per-frame head coordinates and JSON (de)serialization.

Annotation JSON schema::

    {"clip_id": str, "width": int, "height": int, "fps": number,
     "frames": [{"frame_index": int, "image_path": str, "heads": [[x, y], ...]}]}

Heads are (x, y) pixel coordinates with x = column, y = row, valid over
0 <= x < width and 0 <= y < height.
"""

import json
from dataclasses import dataclass, field


class AnnotationError(ValueError):
    """Raised for malformed or out-of-bounds annotation data."""


@dataclass(frozen=True)
class HeadPoint:
    x: float
    y: float


@dataclass
class FrameAnnotation:
    frame_index: int
    image_path: str
    heads: list[HeadPoint] = field(default_factory=list)


@dataclass
class ClipAnnotation:
    clip_id: str
    width: int
    height: int
    fps: float
    frames: list[FrameAnnotation] = field(default_factory=list)

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"clip {self.clip_id!r}: non-positive frame size")
        last_index = None
        for frame in self.frames:
            if last_index is not None and frame.frame_index <= last_index:
                raise AnnotationError(
                    f"clip {self.clip_id!r}: frame_index {frame.frame_index} "
                    f"not strictly increasing after {last_index}"
                )
            last_index = frame.frame_index
            for head in frame.heads:
                if not (0 <= head.x < self.width and 0 <= head.y < self.height):
                    raise AnnotationError(
                        f"clip {self.clip_id!r}, frame {frame.frame_index}: head "
                        f"({head.x}, {head.y}) outside {self.width}x{self.height} frame"
                    )
        return self


def clip_to_dict(clip: ClipAnnotation) -> dict:
    return {
        "clip_id": clip.clip_id,
        "width": clip.width,
        "height": clip.height,
        "fps": clip.fps,
        "frames": [
            {
                "frame_index": f.frame_index,
                "image_path": f.image_path,
                "heads": [[float(h.x), float(h.y)] for h in f.heads],
            }
            for f in clip.frames
        ],
    }


def clip_from_dict(data: dict) -> ClipAnnotation:
    if not isinstance(data, dict):
        raise AnnotationError(f"annotation root must be an object, got {type(data).__name__}")
    try:
        frames = []
        for raw in data["frames"]:
            heads = [HeadPoint(float(x), float(y)) for x, y in raw["heads"]]
            frames.append(
                FrameAnnotation(
                    frame_index=int(raw["frame_index"]),
                    image_path=str(raw["image_path"]),
                    heads=heads,
                )
            )
        clip = ClipAnnotation(
            clip_id=str(data["clip_id"]),
            width=int(data["width"]),
            height=int(data["height"]),
            fps=float(data["fps"]),
            frames=frames,
        )
    except KeyError as exc:
        raise AnnotationError(f"missing annotation field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"malformed annotation value: {exc}") from exc
    return clip.validate()


def load_clip(path) -> ClipAnnotation:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"{path}: invalid JSON ({exc})") from exc
    return clip_from_dict(data)


def save_clip(clip: ClipAnnotation, path):
    """Write the clip as canonical JSON (sorted keys, 2-space indent)."""
    clip.validate()
    with open(path, "w", encoding="utf-8") as f:
        json.dump(clip_to_dict(clip), f, sort_keys=True, indent=2)
        f.write("\n")
