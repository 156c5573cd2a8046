import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from ..motion_field import PropagatorParams, SparseFlow, affinity_graph, propagate_dense, rasterize_sparse_field
from ..pose_io import PoseSequence
from ..run_utils import require
from ..trajectory import build_trajectory, track_matrix
from .core import CheckSettings, check

MODULE = "motion_field"


def _random_constraints(rng: np.random.Generator, size: int, count: int) -> SparseFlow:
    flat = rng.choice(size * size, count, replace=False)
    positions = np.stack([flat % size, flat // size], axis=1)
    return SparseFlow(positions, rng.uniform(-5, 5, (count, 2)), size, size)


def fixed_point_oracle(reference: np.ndarray, constraints: SparseFlow, beta: float,
                       max_sweeps: int = 200000, tol: float = 1e-12) -> np.ndarray:
    """Jacobi sweeps of x_p <- sum_q w_pq x_q / sum_q w_pq over free pixels until updates stall."""
    W = affinity_graph(reference, beta)
    degree = np.asarray(W.sum(axis=1)).ravel()
    n = constraints.height * constraints.width
    fixed = np.zeros(n, dtype=bool)
    fixed[constraints.flat_indices] = True

    x = np.zeros((n, 2))
    x[constraints.flat_indices] = constraints.vectors
    x[~fixed] = constraints.vectors.mean(axis=0)
    for _ in range(max_sweeps):
        update = (W @ x) / degree[:, None]
        change = float(np.max(np.abs(update[~fixed] - x[~fixed]))) if (~fixed).any() else 0.0
        x[~fixed] = update[~fixed]
        if change < tol:
            break
    return x.T.reshape(2, constraints.height, constraints.width)


@check(module=MODULE)
def propagation_matches_fixed_point(settings: CheckSettings):
    """Edge-aware propagation agrees with a fixed-point oracle; constraints exact; maximum principle holds."""
    rng = np.random.default_rng(settings.seed)
    params = PropagatorParams(beta=1.0, tol=1e-10)
    worst = 0.0
    for trial in range(50):
        reference = rng.uniform(0, 1, (16, 16, 3))
        constraints = _random_constraints(rng, 16, int(rng.integers(4, 12)))
        dense = propagate_dense(reference, constraints, params)
        oracle = fixed_point_oracle(reference, constraints, params.beta)

        err = float(np.max(np.abs(dense - oracle)))
        worst = max(worst, err)
        require(err < 1e-4, MODULE, "matches fixed-point oracle", trial=trial, max_error=err)

        px, py = constraints.positions[:, 0], constraints.positions[:, 1]
        require(np.array_equal(dense[:, py, px].T, constraints.vectors), MODULE, "constraint pixels exact", trial=trial)
        low, high = constraints.vectors.min(axis=0), constraints.vectors.max(axis=0)
        inside = all(dense[c].min() >= low[c] - 1e-9 and dense[c].max() <= high[c] + 1e-9 for c in range(2))
        require(inside, MODULE, "maximum principle", trial=trial)
    return {"instances": 50, "max_error": worst}


@check(module=MODULE)
def propagation_matches_sparse_solve(settings: CheckSettings):
    """At the default beta the propagated field equals a sparse direct solve of the free-pixel system."""
    rng = np.random.default_rng(settings.seed)
    params = PropagatorParams()
    worst = 0.0
    for trial in range(20):
        reference = rng.uniform(0, 1, (24, 24, 3))
        constraints = _random_constraints(rng, 24, int(rng.integers(4, 16)))
        dense = propagate_dense(reference, constraints, params).reshape(2, -1)

        W = affinity_graph(reference, params.beta).tocsc()
        L = (sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W).tocsc()
        free = np.setdiff1d(np.arange(24 * 24), constraints.flat_indices)
        for c in range(2):
            values = constraints.vectors[:, c]
            exact = spsolve(L[free][:, free], W[free][:, constraints.flat_indices] @ values)
            err = float(np.max(np.abs(dense[c, free] - exact)))
            worst = max(worst, err)
            require(err < 1e-4, MODULE, "matches sparse solve", trial=trial, channel=c, max_error=err)
            inside = dense[c].min() >= values.min() - 1e-4 and dense[c].max() <= values.max() + 1e-4
            require(inside, MODULE, "maximum principle", trial=trial, channel=c)
    return {"instances": 20, "max_error": worst}


@check(module=MODULE)
def splat_peak_equals_displacement(settings: CheckSettings):
    """An isolated keypoint splats its displacement exactly at its anchor pixel."""
    coords = np.array([[[20.0, 20.0]], [[23.0, 18.0]]])
    traj = build_trajectory(PoseSequence(40, 40, coords, np.ones((2, 1))))
    field = rasterize_sparse_field(track_matrix(traj), traj, 40, 40, sigma=3.0).data
    peak = field[0, :, 20, 20]
    require(np.allclose(peak, [3.0, -2.0], atol=0, rtol=0), MODULE, "splat peak", peak=peak.tolist())
    return {"peak": peak.tolist()}
