"""
Pose, flow and image persistence.

Pose sequences are JSON files in the layout DWPose-style extractors dump:
``{"width", "height", "keypoint_count", "frames": [{"index", "keypoints": [[x, y, conf], ...]}]}``
with frame 0 holding the reference image's pose. Dense flow uses the Middlebury
``.flo`` container (little-endian float32 magic, int32 width/height, then u/v
float32 pairs row by row). Flow visualizations are 8-bit RGB PNGs.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .exceptions import (
    FlowFormatError,
    FrameIndexError,
    InputFileError,
    ParameterError,
    PoseFormatError,
    ShapeError,
    TruncatedFileError,
)

logger = logging.getLogger(__name__)

FLO_MAGIC = np.float32(202021.25)
FLO_HEADER_BYTES = 12

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PoseSequence:
    """Keypoints for K joints over frames 0..N (frame 0 is the reference).

    ``coords`` has shape (N+1, K, 2) holding (x, y) pixels and ``conf`` has
    shape (N+1, K). Coordinates may fall outside the image but are finite.
    """
    width: int
    height: int
    coords: np.ndarray
    conf: np.ndarray
    stated_threshold: Optional[float] = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        conf = np.asarray(self.conf, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[2] != 2:
            raise PoseFormatError("coordinates must have shape (frames, K, 2)", field="keypoints")
        if conf.shape != coords.shape[:2]:
            raise PoseFormatError("confidences must have shape (frames, K)", field="keypoints")
        if coords.shape[0] < 1:
            raise PoseFormatError("at least one frame is required", field="frames")
        if not np.all(np.isfinite(coords)):
            raise PoseFormatError("coordinates must be finite", field="keypoints")
        if np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf)):
            raise PoseFormatError("confidence out of range", field="keypoints")
        if self.width <= 0 or self.height <= 0:
            raise PoseFormatError("image dimensions must be positive", field="width/height")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "conf", conf)

    @property
    def keypoint_count(self) -> int:
        return self.coords.shape[1]

    @property
    def frame_count(self) -> int:
        return self.coords.shape[0]

    @property
    def driven_frames(self) -> int:
        """N: the number of frames after the reference."""
        return self.frame_count - 1


@dataclass(frozen=True, eq=False)
class MotionFieldStack:
    """Dense displacement fields with shape (frames, 2, H, W); channel 0 is u, 1 is v."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[1] != 2:
            raise ShapeError(f"motion field stack must be frames x 2 x H x W, got {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise FlowFormatError("motion field contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    def frame(self, index: int) -> np.ndarray:
        if not 0 <= index < self.frames:
            raise FrameIndexError(index, self.frames)
        return self.data[index]

    @classmethod
    def from_frames(cls, frames: Sequence[np.ndarray]) -> "MotionFieldStack":
        return cls(np.stack([np.asarray(f) for f in frames], axis=0))

    @classmethod
    def zeros(cls, frames: int, height: int, width: int) -> "MotionFieldStack":
        return cls(np.zeros((frames, 2, height, width), dtype=np.float64))


# ---------------------------------------------------------------------------
# Pose JSON
# ---------------------------------------------------------------------------

class PoseFrameModel(BaseModel):
    index: int = Field(ge=0)
    keypoints: List[Tuple[float, float, float]]

    @field_validator("keypoints")
    @classmethod
    def _check_keypoints(cls, keypoints):
        for x, y, conf in keypoints:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError("coordinates must be finite")
            if not 0.0 <= conf <= 1.0:
                raise ValueError("confidence out of range")
        return keypoints


class PoseFileModel(BaseModel):
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    keypoint_count: int = Field(ge=1)
    frames: List[PoseFrameModel] = Field(min_length=1)
    conf_threshold: Optional[float] = Field(None, ge=0, le=1)

    @model_validator(mode="after")
    def _check_frames(self):
        for frame in self.frames:
            if len(frame.keypoints) != self.keypoint_count:
                raise ValueError(
                    f"inconsistent keypoint count: frame {frame.index} has "
                    f"{len(frame.keypoints)}, expected {self.keypoint_count}"
                )
        indices = sorted(frame.index for frame in self.frames)
        if indices != list(range(len(indices))):
            raise ValueError(f"non-contiguous frames: {indices}")
        return self


def _validation_to_pose_error(error: ValidationError) -> PoseFormatError:
    first = error.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or "<root>"
    message = first["msg"]
    if message.startswith("Value error, "):
        message = message[len("Value error, "):]
    return PoseFormatError(message, field=field)


def load_pose_sequence(path: PathLike) -> PoseSequence:
    """Load and validate a pose JSON file.

    Low-confidence keypoints are kept; gating happens in ``trajectory``.
    """
    path = Path(path)
    if not path.exists():
        raise InputFileError(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise PoseFormatError(f"invalid JSON in {path}: {e.msg}", field=f"line {e.lineno}")
    except UnicodeDecodeError as e:
        raise PoseFormatError(f"{path} is not UTF-8 text: {e.reason}", field=f"byte {e.start}")

    try:
        model = PoseFileModel.model_validate(raw)
    except ValidationError as e:
        raise _validation_to_pose_error(e)

    frames = sorted(model.frames, key=lambda f: f.index)
    table = np.array([f.keypoints for f in frames], dtype=np.float64)
    logger.debug(f"Loaded {len(frames)} frames x {model.keypoint_count} keypoints from {path}")
    return PoseSequence(
        width=model.width,
        height=model.height,
        coords=table[..., :2],
        conf=table[..., 2],
        stated_threshold=model.conf_threshold,
    )


def save_pose_sequence(seq: PoseSequence, path: PathLike) -> Path:
    """Write a pose sequence in the pose JSON layout; floats round-trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "width": int(seq.width),
        "height": int(seq.height),
        "keypoint_count": seq.keypoint_count,
        "frames": [
            {
                "index": n,
                "keypoints": [
                    [float(seq.coords[n, k, 0]), float(seq.coords[n, k, 1]), float(seq.conf[n, k])]
                    for k in range(seq.keypoint_count)
                ],
            }
            for n in range(seq.frame_count)
        ],
    }
    if seq.stated_threshold is not None:
        payload["conf_threshold"] = float(seq.stated_threshold)
    path.write_text(json.dumps(payload, indent=1))
    return path


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def _single_field(field: Union[MotionFieldStack, np.ndarray], frame: int = 0) -> np.ndarray:
    if isinstance(field, MotionFieldStack):
        return field.frame(frame)
    data = np.asarray(field)
    if data.ndim != 3 or data.shape[0] != 2:
        raise ShapeError(f"flow field must be 2 x H x W, got {data.shape}")
    return data


def load_flow(path: PathLike) -> MotionFieldStack:
    """Read a ``.flo`` file into a single-frame stack (float32 values)."""
    path = Path(path)
    if not path.exists():
        raise InputFileError(path)
    raw = path.read_bytes()
    if len(raw) < FLO_HEADER_BYTES:
        raise TruncatedFileError(path, FLO_HEADER_BYTES, len(raw))

    magic = np.frombuffer(raw, dtype="<f4", count=1, offset=0)[0]
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"bad magic {magic!r} in {path}; expected 202021.25")
    width, height = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if width <= 0 or height <= 0:
        raise FlowFormatError(f"bad dimensions {width}x{height} in {path}")

    expected = FLO_HEADER_BYTES + 2 * width * height * 4
    if len(raw) < expected:
        raise TruncatedFileError(path, expected, len(raw))

    data = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=FLO_HEADER_BYTES)
    hwc = data.reshape(height, width, 2)
    return MotionFieldStack(np.ascontiguousarray(hwc.transpose(2, 0, 1))[None].astype(np.float32))


def save_flow(field: Union[MotionFieldStack, np.ndarray], path: PathLike, frame: int = 0) -> Path:
    """Write one flow frame as ``.flo``; values are stored as float32."""
    data = _single_field(field, frame)
    if not np.all(np.isfinite(data)):
        raise FlowFormatError("cannot save non-finite flow")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _, height, width = data.shape
    with path.open("wb") as f:
        f.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        f.write(np.array([width, height], dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(data.transpose(1, 2, 0)).astype("<f4").tobytes())
    return path


def save_flow_stack(stack: MotionFieldStack, directory: PathLike, prefix: str) -> List[Path]:
    """Write ``<prefix>_<nnnn>.flo`` for every frame, numbering driven frames from 1."""
    directory = Path(directory)
    return [
        save_flow(stack, directory / f"{prefix}_{n + 1:04d}.flo", frame=n)
        for n in range(stack.frames)
    ]


def load_flow_stack(paths: Sequence[PathLike]) -> MotionFieldStack:
    if not paths:
        raise ParameterError("no flow files given")
    return MotionFieldStack.from_frames([load_flow(p).frame(0) for p in paths])


# ---------------------------------------------------------------------------
# Color wheel rendering
# ---------------------------------------------------------------------------

def flow_to_hsv(flow: np.ndarray) -> np.ndarray:
    """Map a 2 x H x W flow to HSV in [0, 1]: hue from the angle, saturation from magnitude."""
    u = np.asarray(flow[0], dtype=np.float64)
    v = np.asarray(flow[1], dtype=np.float64)
    magnitude = np.hypot(u, v)
    peak = magnitude.max() if magnitude.size else 0.0

    hsv = np.empty(u.shape + (3,), dtype=np.float64)
    hsv[..., 0] = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi)
    hsv[..., 0] = np.where(hsv[..., 0] >= 1.0, 0.0, hsv[..., 0])
    hsv[..., 1] = magnitude / peak if peak > 0 else 0.0
    hsv[..., 2] = 1.0
    return hsv


def flow_to_rgb(flow: np.ndarray) -> np.ndarray:
    """8-bit RGB color-wheel rendering; zero flow renders white."""
    rgb = hsv_to_rgb(flow_to_hsv(flow))
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def save_png(rgb: np.ndarray, path: PathLike) -> Path:
    """Write an H x W x 3 uint8 (or [0, 1] float) image as an RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = np.asarray(rgb)
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    Image.fromarray(image).save(path, format="PNG")
    return path


def render_flow_png(field: MotionFieldStack, frame: int, path: PathLike) -> Path:
    flow = field.frame(frame)
    return save_png(flow_to_rgb(flow), path)


def load_reference_image(path: PathLike) -> np.ndarray:
    """Load an image as H x W x 3 float64 RGB in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise InputFileError(path)
    with Image.open(path) as image:
        rgb = np.asarray(image.convert("RGB"), dtype=np.float64)
    return rgb / 255.0
