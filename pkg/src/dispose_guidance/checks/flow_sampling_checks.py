import numpy as np

from ..flow_sampling import nms_peaks, sample_keypoints_nms, watershed_distance_map
from ..run_utils import require
from .core import CheckSettings, check

MODULE = "flow_sampling"


def brute_force_distance(edges: np.ndarray) -> np.ndarray:
    """All-pairs Euclidean distance from every pixel to the nearest edge pixel."""
    ey, ex = np.nonzero(edges)
    yy, xx = np.mgrid[0:edges.shape[0], 0:edges.shape[1]]
    squared = (yy[..., None] - ey) ** 2 + (xx[..., None] - ex) ** 2
    return np.sqrt(squared.min(axis=-1).astype(np.float64))


def _random_edges(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    edges = rng.uniform(0, 1, (size, size)) < rng.uniform(0.01, 0.1)
    if not edges.any():
        edges[rng.integers(size), rng.integers(size)] = True
    return edges


@check(module=MODULE)
def distance_map_exact(settings: CheckSettings):
    """Distance maps equal the all-pairs brute-force distances exactly."""
    rng = np.random.default_rng(settings.seed)
    for trial in range(20):
        edges = _random_edges(rng)
        diff = float(np.max(np.abs(watershed_distance_map(edges) - brute_force_distance(edges))))
        require(diff == 0.0, MODULE, "distance map exact", trial=trial, max_difference=diff)
    return {"edge_sets": 20}


@check(module=MODULE)
def nms_count_monotone(settings: CheckSettings):
    """NMS sample counts never grow with K_f, and no sample lies on the border."""
    rng = np.random.default_rng(settings.seed)
    for trial in range(20):
        dist = watershed_distance_map(_random_edges(rng))
        flow = rng.standard_normal((2,) + dist.shape)
        counts = []
        for kf in (3, 5, 7, 9):
            samples = sample_keypoints_nms(dist, kf, flow)
            counts.append(len(samples))
            px, py = samples.positions[:, 0], samples.positions[:, 1]
            on_border = int(np.sum((px == 0) | (py == 0) | (px == dist.shape[1] - 1) | (py == dist.shape[0] - 1)))
            require(on_border == 0, MODULE, "no border samples", trial=trial, kf=kf, border_samples=on_border)
        require(all(a >= b for a, b in zip(counts, counts[1:])), MODULE, "count non-increasing in K_f",
                trial=trial, counts=counts)
    return {"maps": 20}


@check(module=MODULE)
def nms_peaks_nested(settings: CheckSettings):
    """Peaks for a larger window are a subset of peaks for a smaller one."""
    rng = np.random.default_rng(settings.seed)
    dist = np.round(rng.uniform(0, 4, (24, 24)))
    small, large = nms_peaks(dist, 3), nms_peaks(dist, 7)
    require(not np.any(large & ~small), MODULE, "nested peaks", extra=int(np.sum(large & ~small)))
    return {"peaks_3": int(small.sum()), "peaks_7": int(large.sum())}
