"""
Pytest configuration and shared fixtures for dispose-guidance tests.
"""

import json
from pathlib import Path

import numpy as np
import pytest
import torch

from src.dispose_guidance.guidance_net.pipeline import NetConfig

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture
def rng():
    """Seeded numpy generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def torch_generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def golden_dir():
    return GOLDEN_DIR


@pytest.fixture
def out_dir(tmp_path):
    """Empty output directory for files written by a test."""
    path = tmp_path / "outputs"
    path.mkdir()
    return path


@pytest.fixture
def tiny_net_config():
    """A 32px, 3-level network: latent 4x4, encoder levels 4x4, 2x2, 1x1."""
    return NetConfig(image_size=32, channels=(4, 8, 8), emb_dim=16, feature_dim=4,
                     motion_hidden=4, point_hidden=4, seed=0)


def write_pose_file(path: Path, frames, width: int = 32, height: int = 32) -> Path:
    """Write a pose JSON file from a list of per-frame [[x, y, conf], ...] lists."""
    payload = {
        "width": width,
        "height": height,
        "keypoint_count": len(frames[0]),
        "frames": [{"index": i, "keypoints": kps} for i, kps in enumerate(frames)],
    }
    path.write_text(json.dumps(payload))
    return path


@pytest.fixture
def two_frame_pose_file(tmp_path):
    """Two keypoints; the first moves by (+3, -2), the second stays put."""
    return write_pose_file(
        tmp_path / "poses.json",
        [
            [[10.0, 10.0, 0.9], [20.0, 22.0, 0.8]],
            [[13.0, 8.0, 0.9], [20.0, 22.0, 0.8]],
        ],
    )


@pytest.fixture
def static_pose_file(tmp_path):
    return write_pose_file(
        tmp_path / "static.json",
        [
            [[8.0, 8.0, 1.0], [16.0, 20.0, 1.0]],
            [[8.0, 8.0, 1.0], [16.0, 20.0, 1.0]],
        ],
    )
