import tempfile
from pathlib import Path

import numpy as np

from ..pose_io import (
    MotionFieldStack,
    PoseSequence,
    flow_to_rgb,
    load_flow,
    load_pose_sequence,
    save_flow,
    save_pose_sequence,
)
from ..run_utils import require
from .core import CheckSettings, check

MODULE = "pose_io"


@check(module=MODULE)
def flo_round_trip_bit_exact(settings: CheckSettings):
    """.flo save/load reproduces float32 fields bit for bit."""
    rng = np.random.default_rng(settings.seed)
    worst = 0
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(10):
            h, w = rng.integers(1, 40, 2)
            field = rng.standard_normal((2, h, w)).astype(np.float32) * 50
            path = save_flow(field, Path(tmp) / f"f{i}.flo")
            loaded = load_flow(path).frame(0)
            mismatched = int(np.sum(loaded.view(np.uint32) != field.view(np.uint32)))
            worst = max(worst, mismatched)
            require(mismatched == 0, MODULE, "flo round trip", file=i, mismatched_values=mismatched)
            require(path.stat().st_size == 12 + 8 * h * w, MODULE, "flo size", size=path.stat().st_size)
    return {"files": 10, "mismatched_values": worst}


@check(module=MODULE)
def pose_round_trip(settings: CheckSettings):
    """Pose JSON save/load preserves coordinates and confidences."""
    rng = np.random.default_rng(settings.seed)
    seq = PoseSequence(64, 48, rng.uniform(0, 64, (4, 5, 2)), rng.uniform(0, 1, (4, 5)))
    with tempfile.TemporaryDirectory() as tmp:
        loaded = load_pose_sequence(save_pose_sequence(seq, Path(tmp) / "poses.json"))
    err = float(np.max(np.abs(loaded.coords - seq.coords)))
    require(err < 1e-9 and np.allclose(loaded.conf, seq.conf), MODULE, "pose round trip", max_error=err)
    return {"max_error": err}


@check(module=MODULE)
def zero_flow_renders_white(settings: CheckSettings):
    """A zero field renders as an all-white color wheel image."""
    rgb = flow_to_rgb(MotionFieldStack.zeros(1, 8, 8).frame(0))
    require(bool(np.all(rgb == 255)), MODULE, "zero flow is white", min_value=int(rgb.min()))
    return {"pixels": int(rgb.shape[0] * rgb.shape[1])}
