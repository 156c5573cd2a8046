"""
Keypoint correspondence maps.

Reference keypoints pick up an embedding from a semantic feature map; the
embedding is then written at the keypoint's position in every driven frame.
Coarser levels are rebuilt from scaled coordinates rather than pooled, so the
values stay exact copies of the reference embeddings.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .exceptions import (
    DegenerateFeatureError,
    FeatureFormatError,
    InputFileError,
    ParameterError,
    ShapeError,
    TruncatedFileError,
)
from .motion_field import pixel_positions
from .trajectory import TrajectoryMap

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Point = Tuple[int, int]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeatureMap:
    """D_p x H_f x W_f features describing an image of ``source_height`` x ``source_width`` pixels."""
    data: np.ndarray
    source_height: int
    source_width: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"feature map must be D_p x H_f x W_f with D_p >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise FeatureFormatError("feature map contains non-finite values")
        if self.source_height <= 0 or self.source_width <= 0:
            raise ParameterError("source image dimensions must be positive")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def to_feature_coords(self, xy: np.ndarray) -> np.ndarray:
        """Image-space (..., 2) coordinates to clamped feature-map pixels."""
        xy = np.asarray(xy, dtype=np.float64)
        scale = np.array([self.width / self.source_width, self.height / self.source_height])
        return pixel_positions(xy * scale, self.height, self.width)


@dataclass(frozen=True, eq=False)
class PointEmbeddings:
    vectors: np.ndarray
    valid: np.ndarray

    @property
    def keypoint_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def channels(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True, eq=False)
class CorrespondenceStack:
    """N x D_p x H x W sparse map; zero everywhere except at tracked keypoints."""
    data: np.ndarray

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    def nonzero_mask(self) -> np.ndarray:
        """(N, H, W) mask of pixel columns with any nonzero channel."""
        return np.any(self.data != 0, axis=1)

    def nonzero_counts(self) -> List[int]:
        return [int(c) for c in self.nonzero_mask().sum(axis=(1, 2))]


# ---------------------------------------------------------------------------
# Feature providers
# ---------------------------------------------------------------------------

class FeatureProvider(Protocol):
    def features(self, image: np.ndarray) -> FeatureMap:
        ...


class SyntheticFeatureProvider:
    """Seeded Gaussian features; columns are pairwise distinct in direction with probability one."""

    def __init__(self, dim: int = 8, seed: int = 0, stride: int = 1):
        if dim < 1 or stride < 1:
            raise ParameterError("feature dim and stride must be >= 1")
        self.dim = dim
        self.seed = seed
        self.stride = stride

    def features(self, image: np.ndarray) -> FeatureMap:
        height, width = np.asarray(image).shape[:2]
        rng = np.random.default_rng(self.seed)
        h_f, w_f = max(1, height // self.stride), max(1, width // self.stride)
        return FeatureMap(rng.standard_normal((self.dim, h_f, w_f)), height, width)


class FileFeatureProvider:
    """Features exported by an external extractor (e.g. DIFT) as a feature file."""

    def __init__(self, path: PathLike):
        self.path = Path(path)

    def features(self, image: np.ndarray) -> FeatureMap:
        height, width = np.asarray(image).shape[:2]
        return load_feature_file(self.path, source_height=height, source_width=width)


class DenoiserFeatureProvider:
    """Middle-block activations of the toy denoiser on a lightly noised latent of the image."""

    def __init__(self, denoiser: Any, timestep: int = 261, seed: int = 0, latent_factor: int = 8):
        self.denoiser = denoiser
        self.timestep = timestep
        self.seed = seed
        self.latent_factor = latent_factor

    def features(self, image: np.ndarray) -> FeatureMap:
        import torch

        from .guidance_net.denoiser import encode_latent
        from .guidance_net.schedule import NoiseSchedule, forward_diffuse

        image = np.asarray(image, dtype=np.float64)
        height, width = image.shape[:2]
        schedule = NoiseSchedule.linear()
        with torch.no_grad():
            pixels = torch.from_numpy(image.transpose(2, 0, 1)[None].copy()).float()
            z0 = encode_latent(pixels, self.latent_factor)
            generator = torch.Generator().manual_seed(self.seed)
            eps = torch.randn(z0.shape, generator=generator)
            z_t = forward_diffuse(z0, self.timestep, eps, schedule)
            t = torch.full((1,), self.timestep, dtype=torch.long)
            mid = self.denoiser.mid_features(z_t, t)
        return FeatureMap(mid[0].double().numpy(), height, width)


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

class FeatureHeaderModel(BaseModel):
    dp: int = Field(..., ge=1)
    h: int = Field(..., ge=1)
    w: int = Field(..., ge=1)


def save_feature_file(features: FeatureMap, path: PathLike) -> Path:
    """One JSON header line, then little-endian float32 values in channel-major order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"dp": features.channels, "h": features.height, "w": features.width})
    with path.open("wb") as f:
        f.write(header.encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(features.data).astype("<f4").tobytes())
    return path


def load_feature_file(path: PathLike, source_height: Optional[int] = None,
                      source_width: Optional[int] = None) -> FeatureMap:
    path = Path(path)
    if not path.exists():
        raise InputFileError(path)
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FeatureFormatError(f"{path} has no header line")
    try:
        header = FeatureHeaderModel(**json.loads(raw[:newline].decode("utf-8")))
    except (ValueError, TypeError, ValidationError) as e:
        raise FeatureFormatError(f"bad feature header in {path}: {e}")

    count = header.dp * header.h * header.w
    payload = raw[newline + 1:]
    if len(payload) < 4 * count:
        raise TruncatedFileError(path, newline + 1 + 4 * count, len(raw))
    if len(payload) > 4 * count:
        raise FeatureFormatError(f"{path} has {len(payload) - 4 * count} trailing bytes")

    data = np.frombuffer(payload, dtype="<f4", count=count).reshape(header.dp, header.h, header.w)
    return FeatureMap(data.astype(np.float32), source_height or header.h, source_width or header.w)


# ---------------------------------------------------------------------------
# Correspondence maps
# ---------------------------------------------------------------------------

def extract_point_embeddings(features: FeatureMap, traj: TrajectoryMap) -> PointEmbeddings:
    cells = features.to_feature_coords(traj.coords[0])
    vectors = features.data[:, cells[:, 1], cells[:, 0]].T.copy()
    valid = traj.valid[0].copy()
    vectors[~valid] = 0
    return PointEmbeddings(vectors, valid)


def rescale_correspondence(emb: PointEmbeddings, traj: TrajectoryMap, level_height: int, level_width: int,
                           height: int, width: int) -> CorrespondenceStack:
    """Place embeddings on a level_height x level_width grid from scaled trajectory coordinates.

    Pixel collisions keep the lowest keypoint index.
    """
    if level_height < 1 or level_width < 1:
        raise ParameterError(f"level dims must be positive, got {level_height}x{level_width}")
    if level_height > height or level_width > width:
        raise ParameterError(f"level {level_height}x{level_width} exceeds image {height}x{width}")
    if emb.keypoint_count != traj.keypoint_count:
        raise ShapeError(f"{emb.keypoint_count} embeddings for {traj.keypoint_count} keypoints")

    frames = traj.driven_frames
    out = np.zeros((frames, emb.channels, level_height, level_width), dtype=emb.vectors.dtype)
    scale = np.array([level_width / width, level_height / height])
    cells = pixel_positions(traj.coords[1:] * scale, level_height, level_width)

    for n in range(frames):
        taken = np.zeros((level_height, level_width), dtype=bool)
        for k in np.flatnonzero(emb.valid & traj.valid[n + 1]):
            px, py = cells[n, k]
            if taken[py, px]:
                continue
            taken[py, px] = True
            out[n, :, py, px] = emb.vectors[k]
    return CorrespondenceStack(out)


def build_correspondence_map(emb: PointEmbeddings, traj: TrajectoryMap, height: int, width: int) -> CorrespondenceStack:
    return rescale_correspondence(emb, traj, height, width, height, width)


def correspondence_pyramid(emb: PointEmbeddings, traj: TrajectoryMap, height: int, width: int,
                           level_dims: Sequence[Tuple[int, int]]) -> List[CorrespondenceStack]:
    pyramid = [rescale_correspondence(emb, traj, h_l, w_l, height, width) for h_l, w_l in level_dims]
    logger.debug(f"Correspondence pyramid levels: {[tuple(p.data.shape[2:]) for p in pyramid]}")
    return pyramid


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

def cosine_similarity_map(vector: np.ndarray, features: FeatureMap) -> np.ndarray:
    """Cosine similarity of ``vector`` against every column; zero-norm columns score 0."""
    vector = np.asarray(vector, dtype=np.float64)
    norm = np.linalg.norm(vector)
    if norm == 0:
        raise DegenerateFeatureError()
    columns = features.data.reshape(features.channels, -1).astype(np.float64)
    column_norms = np.linalg.norm(columns, axis=0)
    dots = vector @ columns
    sims = np.divide(dots, column_norms * norm, out=np.zeros_like(dots), where=column_norms > 0)
    return sims.reshape(features.height, features.width)


def retrieve_point(src_features: FeatureMap, src_point: Point, tgt_features: FeatureMap) -> Point:
    """Best-matching target cell for a source cell; ties go to the first cell in row-major order."""
    if src_features.channels != tgt_features.channels:
        raise ShapeError(f"feature dims differ: {src_features.channels} vs {tgt_features.channels}")
    x, y = int(src_point[0]), int(src_point[1])
    if not (0 <= x < src_features.width and 0 <= y < src_features.height):
        raise ParameterError(f"source point ({x}, {y}) outside {src_features.width}x{src_features.height}")

    sims = cosine_similarity_map(src_features.data[:, y, x], tgt_features)
    best = int(np.argmax(sims))
    return best % tgt_features.width, best // tgt_features.width


def retrieval_accuracy(src_features: FeatureMap, tgt_features: FeatureMap,
                       points: Sequence[Point], expected: Sequence[Point]) -> float:
    """Top-1 accuracy of ``retrieve_point`` over query points."""
    if len(points) != len(expected):
        raise ParameterError("points and expected matches must have the same length")
    if not points:
        return 0.0
    hits = sum(
        tuple(retrieve_point(src_features, p, tgt_features)) == tuple(int(c) for c in e)
        for p, e in zip(points, expected)
    )
    return hits / len(points)
