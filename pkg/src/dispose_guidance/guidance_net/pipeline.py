"""
Wiring of the guidance branches around the frozen denoiser.

Variants:
  full  motion guidance enters the ControlNet input, correspondence enters the
        ControlNet encoder, residuals go into the denoiser.
  exp1  motion guidance enters the denoiser input instead; the ControlNet keeps
        the correspondence.
  exp2  no ControlNet; motion guidance enters the denoiser input and
        correspondence enters the denoiser encoder directly.
"""

import hashlib
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, Field, field_validator

from ..exceptions import ConfigError, ParameterError
from .controlnet import GuidanceResiduals, HybridControlNet
from .denoiser import LATENT_CHANNELS, ToyDenoiser
from .encoders import MotionEncoder, PointEncoder

logger = logging.getLogger(__name__)

VARIANTS = ("full", "exp1", "exp2")


class NetConfig(BaseModel):
    variant: str = "full"
    image_size: int = Field(64, ge=8)
    latent_factor: int = Field(8, ge=1)
    channels: Tuple[int, ...] = (8, 16, 16)
    emb_dim: int = Field(32, ge=2)
    feature_dim: int = Field(8, ge=1)
    motion_hidden: int = Field(16, ge=1)
    point_hidden: int = Field(16, ge=1)
    use_sparse_field: bool = True
    use_dense_field: bool = True
    use_correspondence: bool = True
    seed: int = 0

    @field_validator("channels")
    @classmethod
    def _non_empty(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value or min(value) < 1:
            raise ValueError("channels must list at least one positive width")
        return value

    @property
    def latent_size(self) -> int:
        return self.image_size // self.latent_factor

    def level_dims(self) -> List[Tuple[int, int]]:
        """Encoder feature dims per level; level l runs at the latent size over 2^l."""
        return [(self.latent_size >> l, self.latent_size >> l) for l in range(len(self.channels))]


class GuidancePipeline(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        if config.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {config.variant!r}; expected one of {', '.join(VARIANTS)}")
        if not (config.use_sparse_field or config.use_dense_field or config.use_correspondence):
            raise ConfigError("at least one guidance input must be enabled")
        self.config = config
        self.variant = config.variant

        self.base = ToyDenoiser(config.channels, config.emb_dim, seed=config.seed)
        self.base.level_dims(config.latent_size, config.latent_size)
        self.base.requires_grad_(False)
        self.base.eval()

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed + 1)
            self.motion_encoder = MotionEncoder(config.motion_hidden, config.latent_factor)
            self.point_encoder = PointEncoder(config.feature_dim, config.channels, config.point_hidden)
        self.controlnet = HybridControlNet(self.base) if self.variant != "exp2" else None

    # -- components ---------------------------------------------------------

    def components(self) -> Dict[str, nn.Module]:
        parts = {"base": self.base, "motion_encoder": self.motion_encoder, "point_encoder": self.point_encoder}
        if self.controlnet is not None:
            parts["controlnet"] = self.controlnet
        return parts

    def trainable_components(self) -> Dict[str, nn.Module]:
        return {name: module for name, module in self.components().items() if name != "base"}

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for m in self.trainable_components().values() for p in m.parameters() if p.requires_grad]

    def level_dims(self) -> List[Tuple[int, int]]:
        return self.base.level_dims(self.config.latent_size, self.config.latent_size)

    def train(self, mode: bool = True) -> "GuidancePipeline":
        super().train(mode)
        self.base.eval()
        return self

    # -- stages -------------------------------------------------------------

    def motion_encode(self, sparse: Optional[torch.Tensor], dense: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        sparse = sparse if self.config.use_sparse_field else None
        dense = dense if self.config.use_dense_field else None
        if sparse is None and dense is None:
            return None
        return self.motion_encoder(sparse, dense)

    def point_encode_level(self, level_map: torch.Tensor, level: int) -> torch.Tensor:
        return self.point_encoder.forward_level(level_map, level)

    def point_encode(self, level_maps: Optional[Sequence[torch.Tensor]]) -> Optional[List[torch.Tensor]]:
        if level_maps is None or not self.config.use_correspondence:
            return None
        return self.point_encoder(level_maps)

    def controlnet_forward(self, z_t: torch.Tensor, motion: Optional[torch.Tensor],
                           point_levels: Optional[Sequence[torch.Tensor]], t: torch.Tensor) -> GuidanceResiduals:
        if self.controlnet is None:
            raise ParameterError(f"variant {self.variant} has no ControlNet")
        return self.controlnet(z_t, t, motion, point_levels)

    def denoise_with_guidance(self, z_t: torch.Tensor, t: torch.Tensor,
                              residuals: Optional[GuidanceResiduals] = None,
                              latent_offset: Optional[torch.Tensor] = None,
                              encoder_additions: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        return self.base(z_t, t, residuals, latent_offset, encoder_additions)

    def unguided(self, z_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.base(z_t, t)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, sparse: Optional[torch.Tensor] = None,
                dense: Optional[torch.Tensor] = None,
                point_maps: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        motion = self.motion_encode(sparse, dense)
        point_levels = self.point_encode(point_maps)

        if self.variant == "full":
            residuals = self.controlnet_forward(z_t, motion, point_levels, t)
            return self.denoise_with_guidance(z_t, t, residuals)
        if self.variant == "exp1":
            residuals = self.controlnet_forward(z_t, None, point_levels, t)
            return self.denoise_with_guidance(z_t, t, residuals, latent_offset=motion)
        return self.denoise_with_guidance(z_t, t, latent_offset=motion, encoder_additions=point_levels)


def wire_variant(config: NetConfig) -> GuidancePipeline:
    pipeline = GuidancePipeline(config)
    report = trainable_parameter_report(pipeline)
    logger.info(
        f"Wired variant {config.variant}: {sum(r['trainable'] for r in report.values())} trainable, "
        f"{sum(r['frozen'] for r in report.values())} frozen parameters"
    )
    return pipeline


def trainable_parameter_report(pipeline: GuidancePipeline) -> Dict[str, Dict[str, int]]:
    report = {}
    for name, module in pipeline.components().items():
        params = list(module.parameters())
        report[name] = {
            "trainable": sum(p.numel() for p in params if p.requires_grad),
            "frozen": sum(p.numel() for p in params if not p.requires_grad),
        }
    return report


def frozen_checksum(module: nn.Module) -> str:
    """sha256 over parameter and buffer names and bytes, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def pad_unguided_frame(guidance: torch.Tensor) -> torch.Tensor:
    """Prepend a zero frame: driven frame n lines up with latent frame n and frame 0 stays unguided."""
    return torch.cat([torch.zeros_like(guidance[:1]), guidance], dim=0)
