"""
Sparse and dense motion fields.

The sparse field splats every valid keypoint displacement with a peak-normalized
Gaussian. The dense field expands sparse constraints over the reference image;
the built-in propagator is an edge-aware harmonic interpolation that stands in
for a learned conditional motion propagation model, and ``ExternalPropagator``
hands the constraints to such a model running outside this process.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Protocol, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field
from scipy import sparse
from scipy.sparse.linalg import splu

from .exceptions import (
    DimensionError,
    EmptyConstraintError,
    InputFileError,
    ParameterError,
    ShapeError,
)
from .pose_io import MotionFieldStack, load_flow, save_flow
from .trajectory import RefDisplacement, TrackMatrix, TrajectoryMap, _DisplacementSet

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 3.0

# Lower bound on affinities; smaller weights make the constrained Laplacian numerically singular
WEIGHT_FLOOR = 1e-10

PathLike = Union[str, Path]


def round_half_up(values: np.ndarray) -> np.ndarray:
    """Nearest-pixel rounding with halves going up, as integers."""
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5).astype(np.int64)


def pixel_positions(xy: np.ndarray, height: int, width: int) -> np.ndarray:
    """Round (..., 2) coordinates to pixels and clamp them into the image."""
    px = np.clip(round_half_up(xy[..., 0]), 0, width - 1)
    py = np.clip(round_half_up(xy[..., 1]), 0, height - 1)
    return np.stack([px, py], axis=-1)


@dataclass(frozen=True, eq=False)
class SparseFlow:
    """Flow constraints: integer pixel ``positions`` (M, 2) as (px, py) and ``vectors`` (M, 2) as (u, v)."""
    positions: np.ndarray
    vectors: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        vectors = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 2)
        if positions.shape[0] != vectors.shape[0]:
            raise ShapeError("positions and vectors must have the same length")
        if self.height <= 0 or self.width <= 0:
            raise DimensionError(f"image dimensions must be positive, got {self.height}x{self.width}")
        if len(positions):
            if (positions[:, 0].min() < 0 or positions[:, 0].max() >= self.width
                    or positions[:, 1].min() < 0 or positions[:, 1].max() >= self.height):
                raise ParameterError("constraint position outside the image")
            flat = positions[:, 1] * self.width + positions[:, 0]
            if len(np.unique(flat)) != len(flat):
                raise ParameterError("constraint positions must be unique")
        if not np.all(np.isfinite(vectors)):
            raise ParameterError("constraint vectors must be finite")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "vectors", vectors)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def flat_indices(self) -> np.ndarray:
        return self.positions[:, 1] * self.width + self.positions[:, 0]

    @classmethod
    def empty(cls, height: int, width: int) -> "SparseFlow":
        return cls(np.zeros((0, 2), np.int64), np.zeros((0, 2)), height, width)

    @classmethod
    def from_displacements(cls, disp: _DisplacementSet, traj: TrajectoryMap, frame: int,
                           height: int, width: int) -> "SparseFlow":
        """Constraints for driven frame index ``frame`` (0-based); pixel collisions keep the lowest keypoint."""
        anchors = pixel_positions(disp.anchors(traj)[frame], height, width)
        positions, vectors, seen = [], [], set()
        for k in np.flatnonzero(disp.valid[frame]):
            key = (int(anchors[k, 0]), int(anchors[k, 1]))
            if key in seen:
                continue
            seen.add(key)
            positions.append(key)
            vectors.append(disp.disp[frame, k])
        if not positions:
            return cls.empty(height, width)
        return cls(np.array(positions), np.array(vectors), height, width)


class PropagatorParams(BaseModel):
    beta: float = Field(0.01, gt=0)
    max_iters: Optional[int] = Field(None, ge=1)
    tol: float = Field(1e-5, gt=0)
    solver: Literal["direct", "cg"] = "direct"

    def iteration_budget(self, height: int, width: int) -> int:
        return self.max_iters if self.max_iters is not None else 10 * height * width


# ---------------------------------------------------------------------------
# Sparse field
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Peak-normalized (center weight 1) Gaussian truncated at radius ceil(3 sigma)."""
    radius = int(math.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(offsets, offsets, indexing="ij")
    return np.exp(-(dx ** 2 + dy ** 2) / (2 * sigma ** 2))


def rasterize_sparse_field(disp: Union[TrackMatrix, RefDisplacement], traj: TrajectoryMap,
                           height: int, width: int, sigma: float = DEFAULT_SIGMA) -> MotionFieldStack:
    """Gaussian-splat keypoint displacements into one field per driven frame; overlaps sum."""
    if height <= 0 or width <= 0:
        raise DimensionError(f"image dimensions must be positive, got {height}x{width}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")

    kernel = gaussian_kernel(sigma)
    radius = kernel.shape[0] // 2
    anchors = pixel_positions(disp.anchors(traj), height, width)
    field = np.zeros((disp.driven_frames, 2, height, width), dtype=np.float64)

    for n in range(disp.driven_frames):
        for k in np.flatnonzero(disp.valid[n]):
            cx, cy = anchors[n, k]
            x0, x1 = max(cx - radius, 0), min(cx + radius + 1, width)
            y0, y1 = max(cy - radius, 0), min(cy + radius + 1, height)
            window = kernel[y0 - cy + radius:y1 - cy + radius, x0 - cx + radius:x1 - cx + radius]
            field[n, 0, y0:y1, x0:x1] += window * disp.disp[n, k, 0]
            field[n, 1, y0:y1, x0:x1] += window * disp.disp[n, k, 1]

    return MotionFieldStack(field)


# ---------------------------------------------------------------------------
# Dense field
# ---------------------------------------------------------------------------

def affinity_graph(reference: np.ndarray, beta: float) -> sparse.csr_matrix:
    """Symmetric 4-neighbour weights exp(-||I_p - I_q||^2 / beta) over an H x W x 3 image.

    Weights are floored at ``WEIGHT_FLOOR``.
    """
    height, width = reference.shape[:2]
    image = np.asarray(reference, dtype=np.float64).reshape(height, width, -1)
    index = np.arange(height * width).reshape(height, width)

    rows, cols, weights = [], [], []
    for a, b, ia, ib in (
        (image[:, :-1], image[:, 1:], index[:, :-1], index[:, 1:]),
        (image[:-1, :], image[1:, :], index[:-1, :], index[1:, :]),
    ):
        w = np.maximum(np.exp(-np.sum((a - b) ** 2, axis=-1) / beta), WEIGHT_FLOOR).ravel()
        rows += [ia.ravel(), ib.ravel()]
        cols += [ib.ravel(), ia.ravel()]
        weights += [w, w]

    n = height * width
    return sparse.coo_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()


def _relative_residual(A: sparse.csr_matrix, x: np.ndarray, b: np.ndarray) -> float:
    """||b - Ax|| / ||b||, or the plain residual norm when b is zero."""
    scale = float(np.linalg.norm(b))
    residual = float(np.linalg.norm(b - A @ x))
    return residual / scale if scale > 0 else residual


def _jacobi_cg(A: sparse.csr_matrix, b: np.ndarray, x0: np.ndarray, max_iters: int,
               tol: float) -> Tuple[np.ndarray, int, float]:
    """Jacobi-preconditioned conjugate gradient on an SPD system.

    Stops once ||r|| / ||b|| < tol. Returns the best iterate seen, the
    iteration count and its relative residual.
    """
    diag = A.diagonal()
    scale = float(np.linalg.norm(b)) or 1.0
    x = x0.copy()
    r = b - A @ x
    z = r / diag
    p = z.copy()
    rz = float(r @ z)

    best_x, best_res = x.copy(), float(np.linalg.norm(r)) / scale
    iteration = 0
    while best_res >= tol and iteration < max_iters:
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = r / diag
        iteration += 1

        res = float(np.linalg.norm(r)) / scale
        if res < best_res:
            best_x, best_res = x.copy(), res

        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return best_x, iteration, best_res


def propagate_dense(reference: np.ndarray, constraints: SparseFlow,
                    params: Optional[PropagatorParams] = None) -> np.ndarray:
    """Expand sparse flow constraints into a dense 2 x H x W field over the reference image.

    Each free pixel takes the affinity-weighted mean of its 4 neighbours;
    constraint pixels keep their values exactly. The ``direct`` solver factors
    the free-pixel system once; ``cg`` iterates from the constraint mean.
    Either way a relative residual above ``tol`` is logged as a warning.
    """
    params = params or PropagatorParams()
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim == 2:
        reference = reference[..., None]
    height, width = reference.shape[:2]
    if (height, width) != (constraints.height, constraints.width):
        raise DimensionError(
            f"reference is {height}x{width} but constraints are {constraints.height}x{constraints.width}"
        )
    if len(constraints) == 0:
        raise EmptyConstraintError()

    n = height * width
    fixed = constraints.flat_indices
    free = np.setdiff1d(np.arange(n), fixed)
    field = np.zeros((2, n), dtype=np.float64)
    field[:, fixed] = constraints.vectors.T

    if len(free):
        W = affinity_graph(reference, params.beta)
        laplacian = (sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W).tocsr()
        A = laplacian[free][:, free]
        coupling = W[free][:, fixed]
        factor = splu(A.tocsc()) if params.solver == "direct" else None
        budget = params.iteration_budget(height, width)

        for channel in range(2):
            values = constraints.vectors[:, channel]
            b = coupling @ values
            if factor is not None:
                x, iterations = factor.solve(b), 0
                residual = _relative_residual(A, x, b)
            else:
                x0 = np.full(len(free), values.mean())
                x, iterations, residual = _jacobi_cg(A, b, x0, budget, params.tol)
            if residual >= params.tol:
                logger.warning(
                    f"Propagation channel {channel} did not converge: relative residual {residual:.3g} "
                    f"after {iterations} iterations (tol {params.tol:g}); using best iterate"
                )
            else:
                logger.debug(f"Propagation channel {channel} solved in {iterations} iterations")
            field[channel, free] = x

    return field.reshape(2, height, width)


class MotionPropagator(Protocol):
    def propagate(self, reference: np.ndarray, constraints: SparseFlow, frame: int) -> np.ndarray:
        ...


class HarmonicPropagator:
    """The deterministic edge-aware baseline."""

    def __init__(self, params: Optional[PropagatorParams] = None):
        self.params = params or PropagatorParams()

    def propagate(self, reference: np.ndarray, constraints: SparseFlow, frame: int) -> np.ndarray:
        return propagate_dense(reference, constraints, self.params)


class ExternalPropagator:
    """Exchange constraints with an externally run propagation model through a directory.

    For driven frame n the constraints are written to ``constraints_<nnnn>.flo``
    (+ mask) and the dense result is read from ``dense_<nnnn>.flo``.
    """

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)

    def propagate(self, reference: np.ndarray, constraints: SparseFlow, frame: int) -> np.ndarray:
        if len(constraints) == 0:
            raise EmptyConstraintError()
        export_constraints(constraints, self.directory / f"constraints_{frame:04d}.flo")
        dense_path = self.directory / f"dense_{frame:04d}.flo"
        if not dense_path.exists():
            raise InputFileError(dense_path, "external dense field not found (run the propagator on the exported constraints)")
        dense = import_dense_field(dense_path)
        if dense.shape[1:] != (constraints.height, constraints.width):
            raise DimensionError(f"external field {dense_path} is {dense.shape[1]}x{dense.shape[2]}")
        return dense.astype(np.float64)


def dense_field_stack(reference: np.ndarray, ref_disp: RefDisplacement, traj: TrajectoryMap,
                      params: Optional[PropagatorParams] = None,
                      propagator: Optional[MotionPropagator] = None) -> MotionFieldStack:
    """One dense field per driven frame, each propagated from the reference keypoints.

    A frame without valid keypoints gets a zero field.
    """
    propagator = propagator or HarmonicPropagator(params)
    height, width = np.asarray(reference).shape[:2]
    frames = []
    for n in range(ref_disp.driven_frames):
        constraints = SparseFlow.from_displacements(ref_disp, traj, n, height, width)
        if len(constraints) == 0:
            logger.warning(f"Frame {n + 1}: no valid keypoints, using a zero dense field")
            frames.append(np.zeros((2, height, width)))
            continue
        frames.append(propagator.propagate(reference, constraints, n + 1))
    return MotionFieldStack(np.stack(frames, axis=0)) if frames else MotionFieldStack.zeros(0, height, width)


# ---------------------------------------------------------------------------
# Constraint exchange
# ---------------------------------------------------------------------------

def mask_path_for(flo_path: PathLike) -> Path:
    flo_path = Path(flo_path)
    return flo_path.with_name(f"{flo_path.stem}_mask.png")


def export_constraints(constraints: SparseFlow, path: PathLike, allow_empty: bool = False) -> Tuple[Path, Path]:
    """Write constraints as a ``.flo`` that is zero off-constraint plus a white-on-black mask PNG."""
    if len(constraints) == 0 and not allow_empty:
        raise EmptyConstraintError()
    field = np.zeros((2, constraints.height, constraints.width), dtype=np.float64)
    mask = np.zeros((constraints.height, constraints.width), dtype=np.uint8)
    px, py = constraints.positions[:, 0], constraints.positions[:, 1]
    field[0, py, px] = constraints.vectors[:, 0]
    field[1, py, px] = constraints.vectors[:, 1]
    mask[py, px] = 255

    flo_path = save_flow(field, path)
    mask_path = mask_path_for(flo_path)
    Image.fromarray(np.repeat(mask[..., None], 3, axis=2)).save(mask_path, format="PNG")
    return flo_path, mask_path


def import_constraints(path: PathLike, mask_path: Optional[PathLike] = None) -> SparseFlow:
    field = import_dense_field(path)
    mask_path = Path(mask_path) if mask_path else mask_path_for(path)
    if not mask_path.exists():
        raise InputFileError(mask_path)
    with Image.open(mask_path) as image:
        mask = np.asarray(image.convert("L")) > 127
    py, px = np.nonzero(mask)
    return SparseFlow(np.stack([px, py], axis=1), field[:, py, px].T.astype(np.float64),
                      field.shape[1], field.shape[2])


def import_dense_field(path: PathLike) -> np.ndarray:
    """Read any ``.flo`` file as a 2 x H x W array."""
    return load_flow(path).frame(0)
