"""
Motion and point encoders.

Both end in zero-initialized layers, so a fresh encoder emits exact zeros and
the frozen denoiser is untouched until training moves them.
"""

import math
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from ..exceptions import ParameterError, ShapeError
from .denoiser import LATENT_CHANNELS


class ZeroConv2d(nn.Module):
    """Convolution with weight and bias initialized to zero."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1, bias: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2, bias=bias)
        nn.init.zeros_(self.conv.weight)
        if bias:
            nn.init.zeros_(self.conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class MotionBranch(nn.Module):
    """log2(f) stride-2 Conv -> SiLU stages, then a zero convolution to the latent channels."""

    def __init__(self, hidden: int = 16, factor: int = 8, in_channels: int = 2):
        super().__init__()
        if factor < 1 or factor & (factor - 1):
            raise ParameterError(f"latent factor must be a power of two, got {factor}")
        stages: List[nn.Module] = []
        previous = in_channels
        for _ in range(int(math.log2(factor))):
            stages += [nn.Conv2d(previous, hidden, 3, stride=2, padding=1), nn.SiLU()]
            previous = hidden
        if not stages:
            stages += [nn.Conv2d(previous, hidden, 3, padding=1), nn.SiLU()]
        self.stages = nn.Sequential(*stages)
        self.out = ZeroConv2d(hidden, LATENT_CHANNELS, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.stages(x))


class MotionEncoder(nn.Module):
    """F_m = F_e(E_s(F_s) + E_d(F_d)); either branch can be switched off by passing None."""

    def __init__(self, hidden: int = 16, factor: int = 8):
        super().__init__()
        self.factor = factor
        self.sparse_branch = MotionBranch(hidden, factor)
        self.dense_branch = MotionBranch(hidden, factor)
        # No bias: the fused output stays exactly zero while both branches output zero
        self.fusion = nn.Conv2d(LATENT_CHANNELS, LATENT_CHANNELS, 3, padding=1, bias=False)

    def forward(self, sparse: Optional[torch.Tensor], dense: Optional[torch.Tensor]) -> torch.Tensor:
        if sparse is None and dense is None:
            raise ParameterError("motion encoder needs at least one of the sparse and dense fields")
        if sparse is not None and dense is not None and sparse.shape != dense.shape:
            raise ShapeError(f"sparse field {tuple(sparse.shape)} and dense field {tuple(dense.shape)} differ")
        reference = sparse if sparse is not None else dense
        if reference.ndim != 4 or reference.shape[1] != 2:
            raise ShapeError(f"motion fields must be B x 2 x H x W, got {tuple(reference.shape)}")
        if reference.shape[2] % self.factor or reference.shape[3] % self.factor:
            raise ShapeError(f"field {reference.shape[2]}x{reference.shape[3]} not divisible by {self.factor}")

        fused = 0
        if sparse is not None:
            fused = fused + self.sparse_branch(sparse)
        if dense is not None:
            fused = fused + self.dense_branch(dense)
        return self.fusion(fused)


class PointEncoder(nn.Module):
    """Per-level per-pixel two-layer perceptrons D_p -> level width, both layers bias-free."""

    def __init__(self, feature_dim: int, level_channels: Sequence[int], hidden: int = 16):
        super().__init__()
        self.feature_dim = feature_dim
        self.mlps = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(feature_dim, hidden, 1, bias=False),
                nn.SiLU(),
                ZeroConv2d(hidden, width, 1, bias=False),
            )
            for width in level_channels
        )

    @property
    def levels(self) -> int:
        return len(self.mlps)

    def forward_level(self, level_map: torch.Tensor, level: int) -> torch.Tensor:
        if not 0 <= level < self.levels:
            raise ParameterError(f"level {level} outside 0..{self.levels - 1}")
        if level_map.ndim != 4 or level_map.shape[1] != self.feature_dim:
            raise ShapeError(
                f"expected B x {self.feature_dim} x h x w correspondence map, got {tuple(level_map.shape)}",
                level=str(level),
            )
        return self.mlps[level](level_map)

    def forward(self, level_maps: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        if len(level_maps) != self.levels:
            raise ShapeError(f"{len(level_maps)} correspondence levels for {self.levels} encoder levels")
        return [self.forward_level(m, l) for l, m in enumerate(level_maps)]
