"""
Keypoint trajectories and the two displacement sets derived from them.

The track matrix holds frame-to-frame displacements (the training-time signal)
and the reference displacements hold each frame's offset from frame 0 (the
inference-time signal). Both are indexed by driven frame n = 1..N, stored at
array position n - 1.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterError
from .pose_io import PoseSequence

logger = logging.getLogger(__name__)

DEFAULT_CONF_THRESHOLD = 0.3


@dataclass(frozen=True, eq=False)
class TrajectoryMap:
    """Keypoint positions (N+1, K, 2) plus a confidence-gated validity mask (N+1, K)."""
    coords: np.ndarray
    valid: np.ndarray

    @property
    def keypoint_count(self) -> int:
        return self.coords.shape[1]

    @property
    def driven_frames(self) -> int:
        return self.coords.shape[0] - 1


@dataclass(frozen=True, eq=False)
class _DisplacementSet(ABC):
    """Per driven frame (N, K, 2) displacements with an (N, K) validity mask."""
    disp: np.ndarray
    valid: np.ndarray

    @property
    def driven_frames(self) -> int:
        return self.disp.shape[0]

    @property
    def keypoint_count(self) -> int:
        return self.disp.shape[1]

    @abstractmethod
    def anchors(self, traj: TrajectoryMap) -> np.ndarray:
        """Pixel positions (N, K, 2) each displacement originates from."""


class TrackMatrix(_DisplacementSet):
    """Frame-to-frame displacements; entry n originates at frame n - 1."""

    def anchors(self, traj: TrajectoryMap) -> np.ndarray:
        return traj.coords[:-1]


class RefDisplacement(_DisplacementSet):
    """Displacements from the reference frame; every entry originates at frame 0."""

    def anchors(self, traj: TrajectoryMap) -> np.ndarray:
        return np.broadcast_to(traj.coords[0], self.disp.shape)


def build_trajectory(seq: PoseSequence, conf_threshold: float = DEFAULT_CONF_THRESHOLD) -> TrajectoryMap:
    """Start every keypoint at its reference position; a point is valid where conf >= threshold."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ParameterError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
    valid = seq.conf >= conf_threshold
    logger.debug(f"Trajectory: {int(valid.sum())}/{valid.size} keypoint observations pass {conf_threshold}")
    return TrajectoryMap(coords=seq.coords.copy(), valid=valid)


def track_matrix(traj: TrajectoryMap) -> TrackMatrix:
    disp = traj.coords[1:] - traj.coords[:-1]
    valid = traj.valid[1:] & traj.valid[:-1]
    return TrackMatrix(np.where(valid[..., None], disp, 0.0), valid)


def reference_displacements(traj: TrajectoryMap) -> RefDisplacement:
    disp = traj.coords[1:] - traj.coords[0][None]
    valid = traj.valid[1:] & traj.valid[0][None]
    return RefDisplacement(np.where(valid[..., None], disp, 0.0), valid)
