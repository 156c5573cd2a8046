"""
Unit tests for sparse splatting and dense propagation.
"""

import logging
import math

import numpy as np
import pytest
from scipy import sparse
from scipy.sparse.linalg import spsolve

from src.dispose_guidance.exceptions import (
    DimensionError,
    EmptyConstraintError,
    InputFileError,
    ParameterError,
)
from src.dispose_guidance.motion_field import (
    WEIGHT_FLOOR,
    ExternalPropagator,
    PropagatorParams,
    SparseFlow,
    affinity_graph,
    dense_field_stack,
    export_constraints,
    gaussian_kernel,
    import_constraints,
    pixel_positions,
    propagate_dense,
    rasterize_sparse_field,
)
from src.dispose_guidance.pose_io import PoseSequence
from src.dispose_guidance.trajectory import TrackMatrix, build_trajectory, reference_displacements, track_matrix

pytestmark = pytest.mark.unit


def _trajectory(coords, size=32):
    coords = np.asarray(coords, dtype=np.float64)
    return build_trajectory(PoseSequence(size, size, coords, np.ones(coords.shape[:2])))


def _exact_harmonic(reference, constraints, beta):
    """Dense linear solve of the same Dirichlet problem."""
    height, width = reference.shape[:2]
    W = affinity_graph(reference, beta).toarray()
    L = np.diag(W.sum(axis=1)) - W
    fixed = constraints.flat_indices
    free = np.setdiff1d(np.arange(height * width), fixed)
    out = np.zeros((2, height * width))
    out[:, fixed] = constraints.vectors.T
    for c in range(2):
        out[c, free] = np.linalg.solve(L[np.ix_(free, free)], W[np.ix_(free, fixed)] @ constraints.vectors[:, c])
    return out.reshape(2, height, width)


def test_pixel_positions_round_half_up_and_clamp():
    xy = np.array([[2.5, 3.49], [-4.0, 40.0]])
    np.testing.assert_array_equal(pixel_positions(xy, 10, 10), [[3, 3], [0, 9]])


def test_gaussian_kernel():
    kernel = gaussian_kernel(3.0)
    assert kernel.shape == (19, 19)
    assert kernel[9, 9] == 1.0
    np.testing.assert_allclose(kernel, kernel.T)


def test_splat_peak_equals_displacement():
    """Test that a lone keypoint's splat peaks at its displacement and vanishes past 3 sigma."""
    traj = _trajectory([[[10, 12]], [[13, 10]]])
    field = rasterize_sparse_field(track_matrix(traj), traj, 32, 32, sigma=2.0)
    assert field.frames == 1
    np.testing.assert_allclose(field.frame(0)[:, 12, 10], [3.0, -2.0])
    assert np.all(field.frame(0)[:, 12, 17:] == 0)
    assert np.all(np.abs(field.frame(0)) <= 3.0)


def test_splat_is_linear_in_displacements(rng):
    traj = _trajectory(rng.uniform(0, 32, (3, 4, 2)))
    valid = np.ones((2, 4), dtype=bool)
    first, second = rng.standard_normal((2, 2, 4, 2))
    combined = rasterize_sparse_field(TrackMatrix(2.5 * first + second, valid), traj, 32, 32).data
    parts = [rasterize_sparse_field(TrackMatrix(d, valid), traj, 32, 32).data for d in (first, second)]
    np.testing.assert_allclose(combined, 2.5 * parts[0] + parts[1], atol=1e-12)


def test_splat_value_off_peak():
    """Test that a (3, 4) displacement anchored at (5, 5) with sigma 1 reaches (5, 8) as (3, 4) e^-4.5."""
    traj = _trajectory([[[5, 5]], [[8, 9]]], size=16)
    field = rasterize_sparse_field(reference_displacements(traj), traj, 16, 16, sigma=1.0)
    np.testing.assert_allclose(field.frame(0)[:, 8, 5], np.array([3.0, 4.0]) * math.exp(-4.5), rtol=1e-12)


def test_dense_stack_single_keypoint_fills_image(rng):
    traj = _trajectory([[[6, 9]], [[9, 13]]], size=16)
    stack = dense_field_stack(rng.uniform(size=(16, 16, 3)), reference_displacements(traj), traj)
    np.testing.assert_allclose(stack.frame(0)[0], 3.0, atol=1e-5)
    np.testing.assert_allclose(stack.frame(0)[1], 4.0, atol=1e-5)


def test_splat_sources_differ():
    """Test that the track source anchors at the previous frame and the reference source at frame 0."""
    traj = _trajectory([[[5, 5]], [[8, 5]], [[20, 20]]])
    track = rasterize_sparse_field(track_matrix(traj), traj, 32, 32)
    ref = rasterize_sparse_field(reference_displacements(traj), traj, 32, 32)
    np.testing.assert_allclose(track.frame(1)[:, 5, 8], [12.0, 15.0])
    np.testing.assert_allclose(ref.frame(1)[:, 5, 5], [15.0, 15.0])


def test_splat_zero_displacement_is_zero():
    traj = _trajectory([[[5, 5], [9, 9]]] * 3)
    assert np.all(rasterize_sparse_field(track_matrix(traj), traj, 16, 16).data == 0)


def test_splat_invalid_parameters():
    traj = _trajectory([[[5, 5]], [[6, 5]]])
    with pytest.raises(ParameterError):
        rasterize_sparse_field(track_matrix(traj), traj, 16, 16, sigma=0)
    with pytest.raises(DimensionError):
        rasterize_sparse_field(track_matrix(traj), traj, 0, 16)


def test_affinity_graph_is_symmetric(rng):
    W = affinity_graph(rng.uniform(size=(5, 6, 3)), beta=0.1)
    assert W.format == "csr"
    assert abs(W - W.T).max() == 0
    assert W.nnz == 2 * (5 * 5 + 4 * 6)


def test_uniform_constraints_reproduce_constant(rng):
    reference = rng.uniform(size=(12, 12, 3))
    positions = np.array([[1, 1], [10, 3], [6, 9]])
    constraints = SparseFlow(positions, np.tile([2.0, -1.0], (3, 1)), 12, 12)
    field = propagate_dense(reference, constraints)
    np.testing.assert_allclose(field[0], 2.0, atol=1e-5)
    np.testing.assert_allclose(field[1], -1.0, atol=1e-5)


def test_single_constraint_fills_uniform_image():
    constraints = SparseFlow([[7, 3]], [[1.5, 0.25]], 16, 16)
    field = propagate_dense(np.full((16, 16, 3), 0.5), constraints, PropagatorParams(tol=1e-8))
    np.testing.assert_allclose(field[0], 1.5, atol=1e-6)
    np.testing.assert_allclose(field[1], 0.25, atol=1e-6)


def test_propagation_matches_exact_solve(rng):
    """Test against a dense linear solve on random images and constraints."""
    params = PropagatorParams(beta=1.0, tol=1e-10)
    for _ in range(5):
        reference = rng.uniform(size=(8, 8, 3))
        flat = rng.choice(64, size=5, replace=False)
        constraints = SparseFlow(np.stack([flat % 8, flat // 8], axis=1), rng.uniform(-3, 3, (5, 2)), 8, 8)
        field = propagate_dense(reference, constraints, params)
        np.testing.assert_allclose(field, _exact_harmonic(reference, constraints, 1.0), atol=1e-6)
        px, py = constraints.positions.T
        np.testing.assert_array_equal(field[:, py, px].T, constraints.vectors)


def test_propagation_matches_sparse_solve_at_default_beta(rng):
    """High-contrast images leave many weights at the floor; the field still equals the exact solve."""
    for _ in range(5):
        reference = rng.uniform(size=(16, 16, 3))
        flat = rng.choice(256, size=8, replace=False)
        constraints = SparseFlow(np.stack([flat % 16, flat // 16], axis=1), rng.uniform(-5, 5, (8, 2)), 16, 16)
        field = propagate_dense(reference, constraints)

        W = affinity_graph(reference, PropagatorParams().beta)
        L = (sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W).tocsc()
        fixed = constraints.flat_indices
        free = np.setdiff1d(np.arange(256), fixed)
        for c in range(2):
            b = W.tocsc()[free][:, fixed] @ constraints.vectors[:, c]
            exact = spsolve(L[free][:, free], b)
            np.testing.assert_allclose(field[c].ravel()[free], exact, atol=1e-4)
            low, high = constraints.vectors[:, c].min(), constraints.vectors[:, c].max()
            assert field[c].min() >= low - 1e-4 and field[c].max() <= high + 1e-4


def test_affinity_weights_are_floored():
    reference = np.zeros((2, 2, 3))
    reference[:, 1] = 1.0
    W = affinity_graph(reference, beta=0.01)
    assert W[0, 1] == WEIGHT_FLOOR
    assert W[0, 2] == 1.0


def test_cg_solver_matches_direct(rng):
    reference = rng.uniform(size=(10, 10, 3))
    constraints = SparseFlow([[0, 0], [9, 9], [4, 6]], [[-1, 4], [3, 0], [0.5, 2]], 10, 10)
    direct = propagate_dense(reference, constraints, PropagatorParams(beta=1.0))
    iterative = propagate_dense(reference, constraints, PropagatorParams(beta=1.0, solver="cg", tol=1e-12))
    np.testing.assert_allclose(iterative, direct, atol=1e-8)


def test_maximum_principle(rng):
    reference = rng.uniform(size=(10, 10, 3))
    constraints = SparseFlow([[0, 0], [9, 9], [4, 6]], [[-1, 4], [3, 0], [0.5, 2]], 10, 10)
    field = propagate_dense(reference, constraints, PropagatorParams(beta=0.05))
    assert field[0].min() >= -1 - 1e-6 and field[0].max() <= 3 + 1e-6
    assert field[1].min() >= -1e-6 and field[1].max() <= 4 + 1e-6


def test_non_convergence_warns(caplog):
    constraints = SparseFlow([[0, 0], [7, 7]], [[0, 0], [5, 5]], 8, 8)
    with caplog.at_level(logging.WARNING):
        params = PropagatorParams(solver="cg", max_iters=1, tol=1e-12)
        field = propagate_dense(np.full((8, 8, 3), 0.5), constraints, params)
    assert "did not converge" in caplog.text
    assert np.all(np.isfinite(field))


def test_empty_constraints():
    with pytest.raises(EmptyConstraintError):
        propagate_dense(np.zeros((4, 4, 3)), SparseFlow.empty(4, 4))


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        propagate_dense(np.zeros((4, 5, 3)), SparseFlow([[0, 0]], [[1, 1]], 4, 4))


def test_sparse_flow_validation():
    with pytest.raises(ParameterError):
        SparseFlow([[1, 1], [1, 1]], [[0, 0], [1, 1]], 4, 4)
    with pytest.raises(ParameterError):
        SparseFlow([[4, 0]], [[0, 0]], 4, 4)


def test_from_displacements_keeps_lowest_keypoint():
    """Test that two keypoints rounding to one pixel keep the lower index."""
    traj = _trajectory([[[4.2, 4.0], [3.9, 4.1]], [[6, 4], [9, 9]]])
    constraints = SparseFlow.from_displacements(reference_displacements(traj), traj, 0, 16, 16)
    assert len(constraints) == 1
    np.testing.assert_allclose(constraints.vectors[0], [1.8, 0.0])


def test_dense_stack_zero_displacements():
    traj = _trajectory([[[3, 3], [10, 12]]] * 3, size=16)
    stack = dense_field_stack(np.full((16, 16, 3), 0.5), reference_displacements(traj), traj)
    assert stack.frames == 2
    assert np.all(stack.data == 0)


def test_dense_stack_frame_without_keypoints(caplog):
    """Test that a driven frame whose only keypoint is invalid gets a zero field and a warning."""
    coords = np.array([[[4.0, 4.0]], [[6.0, 5.0]], [[7.0, 7.0]]])
    traj = build_trajectory(PoseSequence(16, 16, coords, np.array([[1.0], [0.0], [1.0]])))
    with caplog.at_level(logging.WARNING):
        stack = dense_field_stack(np.full((16, 16, 3), 0.5), reference_displacements(traj), traj)
    assert "no valid keypoints" in caplog.text
    assert np.all(stack.frame(0) == 0)
    np.testing.assert_allclose(stack.frame(1)[0], 3.0, atol=1e-6)


def test_constraint_exchange(tmp_path):
    """Test exporting constraints and importing them back from .flo + mask."""
    constraints = SparseFlow([[1, 2], [5, 0]], [[0.5, -1.0], [2.0, 3.0]], 6, 8)
    flo, mask = export_constraints(constraints, tmp_path / "c.flo")
    assert mask.name == "c_mask.png"
    loaded = import_constraints(flo)
    order = np.argsort(loaded.flat_indices)
    np.testing.assert_array_equal(loaded.positions[order], [[5, 0], [1, 2]])
    np.testing.assert_allclose(loaded.vectors[order], [[2.0, 3.0], [0.5, -1.0]])


def test_export_empty_requires_flag(tmp_path):
    with pytest.raises(EmptyConstraintError):
        export_constraints(SparseFlow.empty(4, 4), tmp_path / "e.flo")
    flo, _ = export_constraints(SparseFlow.empty(4, 4), tmp_path / "e.flo", allow_empty=True)
    assert flo.exists()


def test_external_propagator_needs_result(tmp_path):
    propagator = ExternalPropagator(tmp_path)
    constraints = SparseFlow([[1, 1]], [[1, 0]], 4, 4)
    with pytest.raises(InputFileError):
        propagator.propagate(np.zeros((4, 4, 3)), constraints, 1)
    assert (tmp_path / "constraints_0001.flo").exists()
