"""
Watershed sampling of sparse flow from a dense forward flow.

Motion edges come from a per-channel Sobel filter, every pixel gets its
Euclidean distance to the nearest edge, and non-maximum suppression with a
K_f x K_f window keeps the distance peaks. Larger K_f gives sparser samples.
"""

import logging
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .exceptions import ParameterError, ShapeError
from .motion_field import PropagatorParams, SparseFlow, propagate_dense
from .pose_io import MotionFieldStack

logger = logging.getLogger(__name__)

DEFAULT_EDGE_THRESHOLD = 1.0
DEFAULT_KF = 9

# EdgeMap: H x W bool array; DistanceMap: H x W float64 array of pixel distances
EdgeMap = np.ndarray
DistanceMap = np.ndarray


def _check_flow(flow: np.ndarray) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be 2 x H x W, got {flow.shape}")
    return flow


def sobel_magnitude(flow: np.ndarray) -> np.ndarray:
    """Euclidean norm over u and v of the per-channel Sobel gradient magnitude (replicate borders)."""
    flow = _check_flow(flow)
    squared = np.zeros(flow.shape[1:], dtype=np.float64)
    for channel in flow:
        gx = ndimage.sobel(channel, axis=1, mode="nearest")
        gy = ndimage.sobel(channel, axis=0, mode="nearest")
        squared += gx ** 2 + gy ** 2
    return np.sqrt(squared)


def flow_edges(flow: np.ndarray, edge_threshold: float = DEFAULT_EDGE_THRESHOLD) -> EdgeMap:
    if edge_threshold < 0:
        raise ParameterError(f"edge threshold must be >= 0, got {edge_threshold}")
    return sobel_magnitude(flow) > edge_threshold


def border_distance(height: int, width: int) -> DistanceMap:
    """Distance from each pixel to the outermost pixel ring."""
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    return np.minimum(np.minimum(rows, height - 1 - rows), np.minimum(cols, width - 1 - cols)).astype(np.float64)


def watershed_distance_map(edges: EdgeMap) -> DistanceMap:
    """Exact Euclidean distance to the nearest edge pixel.

    Without any edge pixel the map falls back to the distance to the image border.
    """
    edges = np.asarray(edges, dtype=bool)
    if not edges.any():
        # Constant flow has no edges; distance to the border still gives NMS an interior peak to keep
        logger.warning("No motion edges found; using distance to the image border")
        return border_distance(*edges.shape)
    return ndimage.distance_transform_edt(~edges).astype(np.float64)


def nms_peaks(dist: DistanceMap, kf: int) -> np.ndarray:
    """Pixels that win every comparison in their K_f x K_f window.

    A pixel beats a neighbour with a smaller value, and beats an equal neighbour
    that comes later in row-major order.
    """
    if kf < 3 or kf % 2 == 0:
        raise ParameterError(f"K_f must be odd and >= 3, got {kf}")
    dist = np.asarray(dist, dtype=np.float64)
    height, width = dist.shape
    r = kf // 2
    padded = np.pad(dist, r, mode="constant", constant_values=-np.inf)
    keep = np.ones_like(dist, dtype=bool)

    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            neighbour = padded[r + dy:r + dy + height, r + dx:r + dx + width]
            later = dy > 0 or (dy == 0 and dx > 0)
            keep &= (dist > neighbour) | ((dist == neighbour) & later)
    return keep


def sample_keypoints_nms(dist: DistanceMap, kf: int, flow: np.ndarray) -> SparseFlow:
    flow = _check_flow(flow)
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != flow.shape[1:]:
        raise ShapeError(f"distance map {dist.shape} does not match flow {flow.shape[1:]}")

    selected = nms_peaks(dist, kf) & (dist > 0)
    selected[0, :] = selected[-1, :] = False
    selected[:, 0] = selected[:, -1] = False

    py, px = np.nonzero(selected)
    height, width = dist.shape
    return SparseFlow(np.stack([px, py], axis=1), flow[:, py, px].T, height, width)


def sample_sparse_flow(flow: np.ndarray, edge_threshold: float = DEFAULT_EDGE_THRESHOLD,
                       kf: int = DEFAULT_KF) -> SparseFlow:
    edges = flow_edges(flow, edge_threshold)
    samples = sample_keypoints_nms(watershed_distance_map(edges), kf, flow)
    logger.debug(f"Watershed sampling kept {len(samples)} points (K_f={kf}, {int(edges.sum())} edge pixels)")
    return samples


def sample_flow_stack(stack: MotionFieldStack, edge_threshold: float = DEFAULT_EDGE_THRESHOLD,
                      kf: int = DEFAULT_KF) -> List[SparseFlow]:
    return [sample_sparse_flow(stack.frame(n), edge_threshold, kf) for n in range(stack.frames)]


def dense_field_from_flow(reference: np.ndarray, flow: np.ndarray,
                          edge_threshold: float = DEFAULT_EDGE_THRESHOLD, kf: int = DEFAULT_KF,
                          params: Optional[PropagatorParams] = None) -> np.ndarray:
    """Training-time dense field: sample the ground-truth flow, then propagate the samples."""
    return propagate_dense(reference, sample_sparse_flow(flow, edge_threshold, kf), params)
