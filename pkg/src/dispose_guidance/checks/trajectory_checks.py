import numpy as np

from ..pose_io import PoseSequence
from ..run_utils import require
from ..trajectory import build_trajectory, reference_displacements, track_matrix
from .core import CheckSettings, check

MODULE = "trajectory"


@check(module=MODULE)
def telescoping_sum(settings: CheckSettings):
    """Summed track-matrix entries equal the final reference displacement."""
    rng = np.random.default_rng(settings.seed)
    worst = 0.0
    for trial in range(1000):
        k = int(rng.integers(1, 33))
        n = int(rng.integers(1, 65))
        coords = rng.uniform(-50, 300, (n + 1, k, 2))
        traj = build_trajectory(PoseSequence(256, 256, coords, np.ones((n + 1, k))))
        total = track_matrix(traj).disp.sum(axis=0)
        err = float(np.max(np.abs(total - reference_displacements(traj).disp[-1])))
        worst = max(worst, err)
        require(err <= 1e-6, MODULE, "telescoping sum", trial=trial, keypoints=k, frames=n, error=err)
    return {"trials": 1000, "max_error": worst}


@check(module=MODULE)
def invalid_entries_are_zero(settings: CheckSettings):
    """Low-confidence keypoints contribute zero displacement and are marked invalid."""
    rng = np.random.default_rng(settings.seed)
    coords = rng.uniform(0, 64, (6, 8, 2))
    conf = rng.uniform(0, 1, (6, 8))
    traj = build_trajectory(PoseSequence(64, 64, coords, conf), 0.5)
    for name, disp in (("track", track_matrix(traj)), ("reference", reference_displacements(traj))):
        leaked = float(np.abs(disp.disp[~disp.valid]).sum())
        require(leaked == 0.0, MODULE, "invalid entries are zero", displacement_set=name, leaked=leaked)
    return {"invalid_track_entries": int((~track_matrix(traj).valid).sum())}
