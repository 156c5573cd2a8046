"""Hybrid ControlNet: a trainable copy of the denoiser encoder emitting zero-initialized residuals."""

import copy
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from ..exceptions import ShapeError
from .denoiser import ToyDenoiser, _checked
from .encoders import ZeroConv2d


@dataclass
class GuidanceResiduals:
    """One residual for the middle block and one per level, matching the denoiser's injection sites."""
    mid: torch.Tensor
    levels: List[torch.Tensor]

    def is_zero(self) -> bool:
        return bool(torch.all(self.mid == 0)) and all(bool(torch.all(r == 0)) for r in self.levels)

    def scaled(self, factor: float) -> "GuidanceResiduals":
        return GuidanceResiduals(self.mid * factor, [r * factor for r in self.levels])


class HybridControlNet(nn.Module):
    def __init__(self, base: ToyDenoiser):
        super().__init__()
        # The time embedding stays shared with the frozen base
        self._base = [base]
        self.conv_in = copy.deepcopy(base.conv_in)
        self.down_blocks = copy.deepcopy(base.down_blocks)
        self.downsamplers = copy.deepcopy(base.downsamplers)
        self.mid_block = copy.deepcopy(base.mid_block)
        for module in (self.conv_in, self.down_blocks, self.downsamplers, self.mid_block):
            module.requires_grad_(True)

        self.zero_convs = nn.ModuleList(ZeroConv2d(width, width) for width in base.channels)
        self.zero_mid = ZeroConv2d(base.channels[-1], base.channels[-1])

    @property
    def base(self) -> ToyDenoiser:
        return self._base[0]

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, motion: Optional[torch.Tensor] = None,
                point_levels: Optional[Sequence[torch.Tensor]] = None) -> GuidanceResiduals:
        emb = self.base.embed(t)
        x = z_t if motion is None else z_t + _checked(motion, z_t, "latent input")
        if point_levels is not None and len(point_levels) != len(self.down_blocks):
            raise ShapeError(f"{len(point_levels)} correspondence levels for {len(self.down_blocks)} encoder levels")

        h = self.conv_in(x)
        residuals = []
        for level, block in enumerate(self.down_blocks):
            h = block(h, emb)
            if point_levels is not None:
                h = h + _checked(point_levels[level], h, str(level))
            residuals.append(self.zero_convs[level](h))
            if level < len(self.downsamplers):
                h = self.downsamplers[level](h)
        mid = self.mid_block(h, emb)
        return GuidanceResiduals(self.zero_mid(mid), residuals)
