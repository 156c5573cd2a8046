import json
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from pydantic import Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ConfigError, InputFileError


class RunConfig(BaseSettings):
    # Paths
    poses: Optional[Path] = None
    flow: Optional[Path] = None
    features: Optional[Path] = None
    reference: Optional[Path] = None
    output_dir: Path = Path("outputs")
    external_cmp: Optional[Path] = None

    # Motion field
    sigma: float = Field(3.0, gt=0)
    beta: float = Field(0.01, gt=0)
    tol: float = Field(1e-5, gt=0)
    max_iters: Optional[int] = Field(None, ge=1)
    conf_threshold: float = Field(0.3, ge=0, le=1)
    sparse_source: Literal["track", "reference"] = "track"

    # Watershed sampling
    kf: int = 9
    edge_threshold: float = Field(1.0, ge=0)

    # Correspondence / network
    levels: int = Field(4, ge=1)
    latent_factor: int = Field(8, ge=1)
    feature_dim: int = Field(8, ge=1)
    variant: Literal["full", "exp1", "exp2"] = "full"
    seed: int = 0
    steps: int = Field(200, ge=1)

    # Logging
    log_level: str = "INFO"
    log_file: Optional[Path] = None

    model_config = SettingsConfigDict(env_prefix="DISPOSE_", env_file=".env", extra="ignore")

    @field_validator("kf")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value < 3 or value % 2 == 0:
            raise ValueError("K_f must be odd and >= 3")
        return value

    @field_validator("latent_factor")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value & (value - 1):
            raise ValueError("latent factor must be a power of two")
        return value


def load_run_config(config_file: Optional[Path] = None, **overrides: Any) -> RunConfig:
    """Build a RunConfig: flags (overrides) win over the JSON file, which wins over env."""
    values: Dict[str, Any] = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise InputFileError(path)
        try:
            with path.open(encoding="utf-8") as f:
                values = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        except UnicodeDecodeError as e:
            raise ConfigError(f"config file {path} is not UTF-8 text: {e.reason}")
        if not isinstance(values, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")

    values.update({k: v for k, v in overrides.items() if v is not None})

    try:
        return RunConfig(**values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}")
