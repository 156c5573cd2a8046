"""
The bundled synthetic training set and batch preparation.

Each clip shows rigid discs sliding over a smooth textured background. The
disc centres are the keypoints, so poses are exact and the reference flow
(frame 0 -> frame n) is known in closed form.
"""

import logging
from dataclasses import dataclass
from typing import List, Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, Field

from ..correspondence import FeatureProvider, SyntheticFeatureProvider, correspondence_pyramid, extract_point_embeddings
from ..exceptions import EmptyConstraintError, ParameterError, ShapeError
from ..flow_sampling import dense_field_from_flow
from ..motion_field import PropagatorParams, dense_field_stack, rasterize_sparse_field
from ..pose_io import MotionFieldStack, PoseSequence
from ..trajectory import build_trajectory, reference_displacements, track_matrix
from .denoiser import encode_latent
from .pipeline import NetConfig, pad_unguided_frame

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SyntheticClip:
    images: np.ndarray
    poses: PoseSequence
    ref_flow: MotionFieldStack

    @property
    def size(self) -> int:
        return self.images.shape[1]


@dataclass(frozen=True, eq=False)
class TrainingBatch:
    """All frames of one clip; guidance tensors carry a zero frame 0."""
    z0: torch.Tensor
    sparse: torch.Tensor
    dense: torch.Tensor
    point_maps: List[torch.Tensor]

    @property
    def frames(self) -> int:
        return self.z0.shape[0]


class DataConfig(BaseModel):
    sparse_source: Literal["track", "reference"] = "track"
    dense_source: Literal["keypoints", "flow"] = "keypoints"
    conf_threshold: float = Field(0.3, ge=0, le=1)
    sigma: float = Field(3.0, gt=0)
    beta: float = Field(0.01, gt=0)
    tol: float = Field(1e-5, gt=0)
    max_iters: Optional[int] = Field(None, ge=1)
    kf: int = 9
    edge_threshold: float = Field(1.0, ge=0)
    # Pixel displacements are fed to the motion encoder in latent-pixel units
    flow_scale: float = Field(0.125, gt=0)

    def propagator_params(self) -> PropagatorParams:
        return PropagatorParams(beta=self.beta, tol=self.tol, max_iters=self.max_iters)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    image = np.full((size, size, 3), 0.4)
    for channel in range(3):
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, 2)
            phase = rng.uniform(0, 2 * np.pi)
            image[..., channel] += 0.05 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return image


def make_synthetic_clip(rng: np.random.Generator, frames: int = 5, size: int = 64, keypoints: int = 6,
                        radius: int = 5) -> SyntheticClip:
    if frames < 2:
        raise ParameterError(f"a clip needs at least 2 frames, got {frames}")
    low, high = radius + 1, size - radius - 2
    if high <= low:
        raise ParameterError(f"image size {size} too small for discs of radius {radius}")

    start = rng.uniform(low, high, (keypoints, 2))
    velocity = rng.uniform(-2.5, 2.5, (keypoints, 2))
    steps = np.arange(frames)[:, None, None]
    centres = np.clip(start[None] + steps * velocity[None], low, high)
    colours = rng.uniform(0.55, 1.0, (keypoints, 3))
    colours[np.arange(keypoints), rng.integers(0, 3, keypoints)] *= 0.3
    background = _background(rng, size)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((frames, size, size, 3))
    owner0 = np.full((size, size), -1)
    for n in range(frames):
        image = background.copy()
        for k in range(keypoints):
            inside = (xx - centres[n, k, 0]) ** 2 + (yy - centres[n, k, 1]) ** 2 <= radius ** 2
            image[inside] = colours[k]
            if n == 0:
                owner0[inside] = k
        images[n] = image

    flow = np.zeros((frames - 1, 2, size, size))
    covered = owner0 >= 0
    for n in range(1, frames):
        offsets = centres[n] - centres[0]
        flow[n - 1, 0][covered] = offsets[owner0[covered], 0]
        flow[n - 1, 1][covered] = offsets[owner0[covered], 1]

    poses = PoseSequence(width=size, height=size, coords=centres, conf=np.ones((frames, keypoints)))
    return SyntheticClip(images, poses, MotionFieldStack(flow))


def make_synthetic_dataset(seed: int = 0, clips: int = 2, frames: int = 5, size: int = 64,
                           keypoints: int = 6) -> List[SyntheticClip]:
    rng = np.random.default_rng(seed)
    dataset = [make_synthetic_clip(rng, frames, size, keypoints) for _ in range(clips)]
    logger.debug(f"Synthetic dataset: {clips} clips x {frames} frames at {size}px, {keypoints} keypoints")
    return dataset


def _dense_from_flow(clip: SyntheticClip, data: DataConfig) -> np.ndarray:
    params = data.propagator_params()
    fields = []
    for n in range(clip.ref_flow.frames):
        try:
            fields.append(dense_field_from_flow(clip.images[0], clip.ref_flow.frame(n), data.edge_threshold,
                                                data.kf, params))
        except EmptyConstraintError:
            logger.warning(f"No flow samples for driven frame {n + 1}; using a zero dense field")
            fields.append(np.zeros((2, clip.size, clip.size)))
    return np.stack(fields)


def prepare_batch(clip: SyntheticClip, net: NetConfig, data: Optional[DataConfig] = None,
                  feature_provider: Optional[FeatureProvider] = None) -> TrainingBatch:
    data = data or DataConfig()
    size = clip.size
    if size != net.image_size:
        raise ShapeError(f"clip is {size}px but the network expects {net.image_size}px")

    traj = build_trajectory(clip.poses, data.conf_threshold)
    ref_disp = reference_displacements(traj)
    sparse_disp = track_matrix(traj) if data.sparse_source == "track" else ref_disp
    sparse = rasterize_sparse_field(sparse_disp, traj, size, size, data.sigma).data

    if data.dense_source == "keypoints":
        dense = dense_field_stack(clip.images[0], ref_disp, traj, data.propagator_params()).data
    else:
        dense = _dense_from_flow(clip, data)

    provider = feature_provider or SyntheticFeatureProvider(net.feature_dim, seed=net.seed)
    features = provider.features(clip.images[0])
    if features.channels != net.feature_dim:
        raise ShapeError(f"feature provider gives {features.channels} channels, network expects {net.feature_dim}")
    embeddings = extract_point_embeddings(features, traj)
    pyramid = correspondence_pyramid(embeddings, traj, size, size, net.level_dims())

    pixels = torch.from_numpy(clip.images.transpose(0, 3, 1, 2).copy()).float()

    def guidance(array: np.ndarray) -> torch.Tensor:
        return pad_unguided_frame(torch.from_numpy(np.ascontiguousarray(array)).float())

    return TrainingBatch(
        z0=encode_latent(pixels, net.latent_factor),
        sparse=guidance(sparse * data.flow_scale),
        dense=guidance(dense * data.flow_scale),
        point_maps=[guidance(level.data) for level in pyramid],
    )
