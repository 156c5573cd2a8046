"""
The frozen toy denoiser.

A small per-frame encoder-decoder over 4-channel latents: sinusoidal time
embedding, residual blocks, stride-2 downsampling, nearest upsampling and skip
concatenation. Text conditioning is a fixed null embedding. Guidance enters
through three optional hooks on ``forward``: residuals added to the middle
output and each skip, an offset added to the input latent, and additions to
the encoder features.
"""

import math
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..exceptions import ShapeError

LATENT_CHANNELS = 4

# Fixed RGB -> latent channel mix used by the pooling stand-in for a VAE encoder
LATENT_MIX = torch.tensor([
    [0.299, 0.587, 0.114],
    [0.5, -0.5, 0.0],
    [0.0, 0.5, -0.5],
    [-0.25, -0.25, 0.5],
])


def encode_latent(pixels: torch.Tensor, factor: int = 8) -> torch.Tensor:
    """(B, 3, H, W) images in [0, 1] to (B, 4, H/f, W/f) latents, centred around zero."""
    if pixels.ndim != 4 or pixels.shape[1] != 3:
        raise ShapeError(f"expected B x 3 x H x W pixels, got {tuple(pixels.shape)}")
    if pixels.shape[2] % factor or pixels.shape[3] % factor:
        raise ShapeError(f"image {pixels.shape[2]}x{pixels.shape[3]} not divisible by latent factor {factor}")
    pooled = F.avg_pool2d(pixels * 2.0 - 1.0, factor)
    return torch.einsum("oc,bchw->bohw", LATENT_MIX.to(pooled.dtype), pooled)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0,
                       dtype: torch.dtype = torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(x))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class ToyDenoiser(nn.Module):
    """Predicts the noise in a latent. Level l of the encoder runs at 1/2^l of the latent resolution."""

    def __init__(self, channels: Sequence[int] = (8, 16, 16), emb_dim: int = 32, seed: int = 0):
        super().__init__()
        self.channels = tuple(channels)
        self.emb_dim = emb_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self._build()
            self._init_weights()

    def _build(self) -> None:
        c = self.channels
        self.time_mlp = nn.Sequential(nn.Linear(self.emb_dim, self.emb_dim), nn.SiLU(),
                                      nn.Linear(self.emb_dim, self.emb_dim))
        self.null_text = nn.Parameter(torch.randn(self.emb_dim) * 0.02)

        self.conv_in = nn.Conv2d(LATENT_CHANNELS, c[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        previous = c[0]
        for level, width in enumerate(c):
            self.down_blocks.append(ResBlock(previous, width, self.emb_dim))
            if level < len(c) - 1:
                self.downsamplers.append(Downsample(width))
            previous = width
        self.mid_block = ResBlock(c[-1], c[-1], self.emb_dim)

        self.up_blocks = nn.ModuleList()
        for level in reversed(range(len(c))):
            self.up_blocks.append(ResBlock(previous + c[level], c[level], self.emb_dim))
            previous = c[level]
        self.conv_out = nn.Conv2d(c[0], LATENT_CHANNELS, 3, padding=1)

    def _init_weights(self) -> None:
        # Orthogonal weights keep the random frozen output at unit scale
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.orthogonal_(module.weight)
                nn.init.zeros_(module.bias)

    @property
    def levels(self) -> int:
        return len(self.channels)

    def level_dims(self, latent_height: int, latent_width: int) -> List[Tuple[int, int]]:
        """Spatial dims of the encoder features at every level."""
        scale = 2 ** (self.levels - 1)
        if latent_height % scale or latent_width % scale:
            raise ShapeError(f"latent {latent_height}x{latent_width} not divisible by {scale}")
        return [(latent_height >> l, latent_width >> l) for l in range(self.levels)]

    def embed(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1)
        dtype = self.time_mlp[0].weight.dtype
        return self.time_mlp(timestep_embedding(t, self.emb_dim, dtype=dtype)) + self.null_text

    def encode(self, x: torch.Tensor, emb: torch.Tensor,
               additions: Optional[Sequence[torch.Tensor]] = None) -> Tuple[List[torch.Tensor], torch.Tensor]:
        """Encoder features per level plus the middle block output."""
        h = self.conv_in(x)
        features = []
        for level, block in enumerate(self.down_blocks):
            h = block(h, emb)
            if additions is not None:
                h = h + _checked(additions[level], h, f"encoder level {level}")
            features.append(h)
            if level < len(self.downsamplers):
                h = self.downsamplers[level](h)
        return features, self.mid_block(h, emb)

    def decode(self, features: List[torch.Tensor], h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        for i, block in enumerate(self.up_blocks):
            level = self.levels - 1 - i
            h = block(torch.cat([h, features[level]], dim=1), emb)
            if level > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.conv_out(F.silu(h))

    def mid_features(self, z_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        _, mid = self.encode(z_t, self.embed(t))
        return mid

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, residuals=None,
                latent_offset: Optional[torch.Tensor] = None,
                encoder_additions: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        if z_t.ndim != 4 or z_t.shape[1] != LATENT_CHANNELS:
            raise ShapeError(f"expected B x {LATENT_CHANNELS} x h x w latents, got {tuple(z_t.shape)}")
        self.level_dims(z_t.shape[2], z_t.shape[3])
        emb = self.embed(t)
        x = z_t if latent_offset is None else z_t + _checked(latent_offset, z_t, "latent input")
        features, mid = self.encode(x, emb, encoder_additions)
        if residuals is not None:
            if len(residuals.levels) != self.levels:
                raise ShapeError(f"{len(residuals.levels)} level residuals for {self.levels} levels")
            mid = mid + _checked(residuals.mid, mid, "middle")
            features = [f + _checked(r, f, f"up level {l}") for l, (f, r) in enumerate(zip(features, residuals.levels))]
        return self.decode(features, mid, emb)


def _checked(addition: torch.Tensor, site: torch.Tensor, level: str) -> torch.Tensor:
    if addition.shape != site.shape:
        raise ShapeError(f"got {tuple(addition.shape)}, injection site is {tuple(site.shape)}", level=level)
    return addition
