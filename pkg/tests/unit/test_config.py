"""
Unit tests for run configuration and the error hierarchy.
"""

import json

import pytest

from src.dispose_guidance.config import RunConfig, load_run_config
from src.dispose_guidance.exceptions import (
    EXIT_INPUT,
    EXIT_INVARIANT,
    ConfigError,
    EmptyConstraintError,
    InputFileError,
    InvariantViolation,
    ParameterError,
    ShapeError,
    TruncatedFileError,
)

pytestmark = pytest.mark.unit


def test_defaults():
    """Test the documented defaults."""
    config = load_run_config()
    assert config.sigma == 3.0
    assert config.beta == 0.01
    assert config.tol == 1e-5
    assert config.conf_threshold == 0.3
    assert config.kf == 9
    assert config.variant == "full"
    assert config.sparse_source == "track"


def test_flags_override_file(tmp_path):
    """Test that explicit overrides win over the JSON file."""
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"sigma": 2.0, "kf": 5}))
    config = load_run_config(path, kf=7, sigma=None)
    assert config.sigma == 2.0
    assert config.kf == 7


def test_environment_is_read(monkeypatch):
    monkeypatch.setenv("DISPOSE_BETA", "0.5")
    assert RunConfig().beta == 0.5


@pytest.mark.parametrize("field, value", [("kf", 4), ("kf", 1), ("latent_factor", 6), ("sigma", 0.0)])
def test_invalid_values(field, value):
    with pytest.raises(ConfigError) as exc_info:
        load_run_config(**{field: value})
    assert field in exc_info.value.detail
    assert exc_info.value.exit_code == EXIT_INPUT


def test_missing_config_file(tmp_path):
    with pytest.raises(InputFileError):
        load_run_config(tmp_path / "missing.json")


def test_config_file_not_an_object(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_config_file_not_utf8(tmp_path):
    path = tmp_path / "run.json"
    path.write_bytes(b"\xff\xfe{}")
    with pytest.raises(ConfigError) as exc_info:
        load_run_config(path)
    assert exc_info.value.exit_code == EXIT_INPUT


def test_exit_codes():
    """Test that input problems exit 2 and invariant/runtime problems exit 1."""
    assert ParameterError().exit_code == EXIT_INPUT
    assert TruncatedFileError("f", 10, 5).exit_code == EXIT_INPUT
    assert EmptyConstraintError().exit_code == EXIT_INVARIANT
    assert InvariantViolation("m", "inv").exit_code == EXIT_INVARIANT


def test_error_details():
    assert str(EmptyConstraintError()) == "empty constraint set"
    err = ShapeError("bad width", level="2")
    assert err.level == "2"
    assert "at level 2" in err.detail
    violation = InvariantViolation("trajectory", "telescoping", {"k": 3})
    assert violation.witness == {"k": 3}
    assert "telescoping violated" in violation.detail
