"""
Integration tests for the ``dispose`` command line.

Each test drives ``main`` with an argument list and inspects the files and
exit code it produces.
"""

import json

import numpy as np
import pytest
from PIL import Image

from src.dispose_guidance.cli import main
from src.dispose_guidance.correspondence import FeatureMap, save_feature_file
from src.dispose_guidance.guidance_net.training import read_loss_csv
from src.dispose_guidance.motion_field import import_constraints
from src.dispose_guidance.pose_io import load_flow, save_flow

pytestmark = pytest.mark.integration


def _png(path):
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"))


def test_poses2fields(two_frame_pose_file, out_dir):
    """Test that one driven frame yields one sparse and one dense field plus renderings."""
    code = main(["poses2fields", "--poses", str(two_frame_pose_file), "--output-dir", str(out_dir)])
    assert code == 0
    names = sorted(p.name for p in out_dir.iterdir())
    assert names == ["dense_0001.flo", "dense_0001.png", "sparse_0001.flo", "sparse_0001.png"]

    sparse = load_flow(out_dir / "sparse_0001.flo").frame(0)
    dense = load_flow(out_dir / "dense_0001.flo").frame(0)
    np.testing.assert_allclose(sparse[:, 10, 10], [3.0, -2.0])
    np.testing.assert_allclose(dense[:, 10, 10], [3.0, -2.0])
    np.testing.assert_allclose(dense[:, 22, 20], [0.0, 0.0])


def test_poses2fields_reference_source(two_frame_pose_file, out_dir):
    code = main(["poses2fields", "--poses", str(two_frame_pose_file), "--output-dir", str(out_dir),
                 "--sparse-source", "reference", "--sigma", "1.5"])
    assert code == 0
    assert (out_dir / "sparse_0001.flo").exists()


def test_static_pose_renders_white(static_pose_file, out_dir):
    assert main(["poses2fields", "--poses", str(static_pose_file), "--output-dir", str(out_dir)]) == 0
    assert np.all(_png(out_dir / "sparse_0001.png") == 255)
    assert np.all(_png(out_dir / "dense_0001.png") == 255)


def test_missing_pose_file(tmp_path, out_dir, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code = main(["poses2fields", "--poses", "missing.json", "--output-dir", str(out_dir)])
    assert code == 2
    assert "missing.json" in capsys.readouterr().out


def test_malformed_pose_file(tmp_path, out_dir):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"width": 8, "height": 8, "keypoint_count": 2,
                                "frames": [{"index": 0, "keypoints": [[1, 1, 1]]}]}))
    assert main(["poses2fields", "--poses", str(path), "--output-dir", str(out_dir)]) == 2


@pytest.mark.parametrize("flag", ["--poses", "--config"])
def test_binary_input_file(tmp_path, out_dir, capsys, flag):
    path = tmp_path / "binary.json"
    path.write_bytes(b"\xff\xfe\x00\x01")
    assert main(["poses2fields", flag, str(path), "--output-dir", str(out_dir)]) == 2
    assert "UTF-8" in capsys.readouterr().out


def test_invalid_kernel_size(tmp_path, out_dir):
    flow = save_flow(np.zeros((2, 8, 8)), tmp_path / "f.flo")
    assert main(["sample-flow", "--flow", str(flow), "--kf", "4", "--output-dir", str(out_dir)]) == 2


def test_config_file_values(two_frame_pose_file, tmp_path, out_dir):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"poses": str(two_frame_pose_file), "output_dir": str(out_dir)}))
    assert main(["poses2fields", "--config", str(config)]) == 0
    assert (out_dir / "dense_0001.flo").exists()


def test_sample_flow_constant(tmp_path, out_dir, capsys):
    """Test that constant flow falls back to border distance and samples carry the constant vector."""
    flow = save_flow(np.stack([np.full((32, 32), 2.0), np.full((32, 32), -1.0)]), tmp_path / "const.flo")
    assert main(["sample-flow", "--flow", str(flow), "--output-dir", str(out_dir)]) == 0
    assert "WARNING" in capsys.readouterr().out
    samples = import_constraints(out_dir / "samples_const.flo")
    assert np.all(samples.vectors == [2.0, -1.0])
    assert (out_dir / "samples_const_mask.png").exists()


def test_sample_flow_directory(tmp_path, out_dir):
    flows = tmp_path / "flows"
    flow = np.zeros((2, 40, 40))
    flow[0, 14:26, 14:26] = 5.0
    save_flow(flow, flows / "a.flo")
    save_flow(flow * 2, flows / "b.flo")
    assert main(["sample-flow", "--flow", str(flows), "--output-dir", str(out_dir)]) == 0
    assert len(import_constraints(out_dir / "samples_a.flo")) > 0
    assert (out_dir / "samples_b.flo").exists()


def test_render_flow(golden_dir, out_dir):
    assert main(["render-flow", "--flow", str(golden_dir / "ones_2x2.flo"), "--output-dir", str(out_dir)]) == 0
    rgb = _png(out_dir / "ones_2x2.png")
    assert rgb.shape == (2, 2, 3)
    assert np.all(rgb == rgb[0, 0])


def test_build_correspondence(two_frame_pose_file, out_dir):
    code = main(["build-correspondence", "--poses", str(two_frame_pose_file), "--output-dir", str(out_dir),
                 "--levels", "3", "--feature-dim", "4"])
    assert code == 0
    shapes = [np.load(out_dir / f"correspondence_l{l}.npy").shape for l in range(3)]
    assert shapes == [(1, 4, 4, 4), (1, 4, 2, 2), (1, 4, 1, 1)]


def test_build_correspondence_feature_file(two_frame_pose_file, tmp_path, out_dir):
    features = FeatureMap(np.random.default_rng(0).standard_normal((3, 8, 8)).astype(np.float32), 8, 8)
    path = save_feature_file(features, tmp_path / "ref.feat")
    code = main(["build-correspondence", "--poses", str(two_frame_pose_file), "--features", str(path),
                 "--levels", "1", "--output-dir", str(out_dir)])
    assert code == 0
    level = np.load(out_dir / "correspondence_l0.npy")
    assert level.shape == (1, 3, 4, 4)
    assert int(np.any(level != 0, axis=1).sum()) == 2


def test_retrieve(tmp_path, capsys):
    data = np.random.default_rng(1).standard_normal((4, 5, 6)).astype(np.float32)
    src = save_feature_file(FeatureMap(data, 5, 6), tmp_path / "src.feat")
    tgt = save_feature_file(FeatureMap(data[:, :, ::-1].copy(), 5, 6), tmp_path / "tgt.feat")
    assert main(["retrieve", "--src-features", str(src), "--tgt-features", str(tgt), "--point", "1", "2"]) == 0
    assert "(1, 2) -> (4, 2)" in capsys.readouterr().out


def test_retrieve_channel_mismatch(tmp_path):
    src = save_feature_file(FeatureMap(np.ones((4, 2, 2), np.float32), 2, 2), tmp_path / "src.feat")
    tgt = save_feature_file(FeatureMap(np.ones((3, 2, 2), np.float32), 2, 2), tmp_path / "tgt.feat")
    assert main(["retrieve", "--src-features", str(src), "--tgt-features", str(tgt), "--point", "0", "0"]) == 1


@pytest.mark.slow
def test_train_toy_is_deterministic(tmp_path):
    """Test that two seeded runs write identical loss curves and a loadable checkpoint."""
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train-toy", "--steps", "3", "--seed", "1", "--output-dir", str(out)]) == 0
        runs.append(read_loss_csv(out / "loss.csv"))
        assert (out / "checkpoint" / "manifest.json").exists()
    assert len(runs[0]) == 3
    assert runs[0] == runs[1]
