"""Lightweight upsampling generator with skip-layer excitation.

Latent vectors map to a 4x4 feature map through a transposed convolution,
then nearest-upsample + 3x3 conv + BatchNorm + GLU blocks double the
resolution until the target size; skip-layer-excitation blocks gate
high-resolution features with low-resolution ones. The output layer is a
3x3 convolution into tanh, so pixels live in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

# resolution -> channel multiplier applied to base_channels
CHANNEL_MULTIPLIERS = {
    4: 16.0,
    8: 8.0,
    16: 4.0,
    32: 2.0,
    64: 2.0,
    128: 1.0,
    256: 0.5,
    512: 0.25,
    1024: 0.125,
}

# skip-layer-excitation pairing: gate source resolution -> gated resolution
SLE_PAIRS = {128: 8, 256: 16, 512: 32}


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 256
    output_resolution: int = 256
    base_channels: int = 128

    def validate(self) -> None:
        r = self.output_resolution
        if r not in CHANNEL_MULTIPLIERS or r < 32:
            raise GeneratorError(
                f"unsupported output_resolution {r}; expected a power of two "
                "in 32..1024 (32/64 are the debug scale)"
            )
        if self.latent_dim < 1 or self.base_channels < 1:
            raise GeneratorError("latent_dim and base_channels must be positive")


def channels_at(base_channels: int, resolution: int) -> int:
    return int(round(base_channels * CHANNEL_MULTIPLIERS[resolution]))


class UpBlock(nn.Module):
    """Nearest 2x upsample -> 3x3 conv -> BatchNorm -> gated linear unit."""

    def __init__(self, cin, cout):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = nn.Conv2d(cin, cout * 2, 3, 1, 1, bias=False)
        self.norm = nn.BatchNorm2d(cout * 2)

    def forward(self, x):
        return torch.nn.functional.glu(self.norm(self.conv(self.up(x))), dim=1)


class SkipLayerExcitation(nn.Module):
    """Gate high-resolution features with pooled low-resolution ones."""

    def __init__(self, low_channels, high_channels):
        super().__init__()
        self.gate = nn.Sequential(
            nn.AdaptiveAvgPool2d(4),
            nn.Conv2d(low_channels, high_channels, 4, 1, 0, bias=False),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(high_channels, high_channels, 1, 1, 0),
        )
        self.high_channels = high_channels

    def forward(self, low, high):
        if high.shape[1] != self.high_channels:
            raise GeneratorError(
                f"gate produces {self.high_channels} channels but the gated "
                f"feature has {high.shape[1]}"
            )
        return high * torch.sigmoid(self.gate(low))


def skip_layer_excitation(sle: SkipLayerExcitation, low, high):
    """Functional form: high * sigmoid(gate(low)), broadcast over space."""
    return sle(low, high)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = lambda r: channels_at(cfg.base_channels, r)
        self.stem = nn.Sequential(
            nn.ConvTranspose2d(cfg.latent_dim, ch(4) * 2, 4, 1, 0, bias=False),
            nn.BatchNorm2d(ch(4) * 2),
            nn.GLU(dim=1),
        )
        resolutions = [
            4 * 2**i for i in range(1, int(math.log2(cfg.output_resolution // 4)) + 1)
        ]
        self.resolutions = tuple(resolutions)
        self.blocks = nn.ModuleDict(
            {str(r): UpBlock(ch(r // 2), ch(r)) for r in resolutions}
        )
        self.sle = nn.ModuleDict(
            {
                str(r): SkipLayerExcitation(ch(SLE_PAIRS[r]), ch(r))
                for r in resolutions
                if r in SLE_PAIRS and SLE_PAIRS[r] >= 4
            }
        )
        self.to_rgb = nn.Conv2d(ch(cfg.output_resolution), 3, 3, 1, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise GeneratorError(
                f"expected z of shape (B, {self.cfg.latent_dim}), got {tuple(z.shape)}"
            )
        x = self.stem(z.reshape(z.shape[0], -1, 1, 1))
        feats = {4: x}
        for r in self.resolutions:
            x = self.blocks[str(r)](x)
            if str(r) in self.sle:
                x = self.sle[str(r)](feats[SLE_PAIRS[r]], x)
            feats[r] = x
        return torch.tanh(self.to_rgb(x))


def build_generator(cfg: GeneratorConfig) -> Generator:
    return Generator(cfg)


def generate(g: Generator, z: torch.Tensor) -> torch.Tensor:
    """Images of shape (B, 3, R, R) with values in [-1, 1]."""
    return g(z)


def sample_latents(
    n: int, latent_dim: int, generator: torch.Generator | None = None
) -> torch.Tensor:
    return torch.randn(n, latent_dim, generator=generator)
