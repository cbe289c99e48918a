"""Fixed random feature projections between the pyramid and the discriminators.

Two mixing strategies over the four pyramid levels:

* cross-channel mixing: a random, frozen 1x1 convolution per level (no bias,
  no activation), injective almost surely when out-channels >= in-channels;
* cross-scale mixing: random, frozen 3x3 residual blocks with bilinear
  upsampling fusing deep levels into shallow ones, a small top-down U-Net.

After seeded initialization the parameters are never trained (a trainable
toggle exists solely for the ablation that shows training them hurts).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .feature_net import FeaturePyramid, fingerprint

MODES = ("none", "feature_norm", "ccm", "ccm_csm")
INITS = ("kaiming", "rotation")


class ProjectorError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionConfig:
    mode: str = "ccm_csm"
    init: str = "kaiming"
    channel_ratio: float = 1.0
    trainable: bool = False
    seed: int = 0
    # Per-level fusion widths for cross-scale mixing; None means the
    # cross-channel output widths (input channels scaled by channel_ratio).
    level_widths: tuple[int, int, int, int] | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ProjectorError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init not in INITS:
            raise ProjectorError(f"init must be one of {INITS}, got {self.init!r}")
        if self.channel_ratio < 1.0:
            raise ProjectorError(
                f"channel_ratio must be >= 1 (injectivity), got {self.channel_ratio}"
            )
        if self.init == "rotation" and self.channel_ratio != 1.0:
            raise ProjectorError("rotation init requires channel_ratio == 1")


class _ResBlock3x3(nn.Module):
    """3x3 convolution with identity skip; no normalization, no bias."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, 1, 1, bias=False)

    def forward(self, x):
        return x + self.conv(x)


class ProjectionSet(nn.Module):
    """Frozen per-level mixing applied to a four-level feature pyramid."""

    def __init__(self, pyramid_channels: tuple[int, ...], cfg: ProjectionConfig):
        super().__init__()
        cfg.validate()
        if len(pyramid_channels) != 4:
            raise ProjectorError(
                f"expected 4 pyramid channel counts, got {pyramid_channels}"
            )
        self.cfg = cfg
        self.in_channels = tuple(pyramid_channels)
        if cfg.mode in ("none", "feature_norm"):
            self.out_channels = self.in_channels
        else:
            widths = cfg.level_widths or tuple(
                int(round(c * cfg.channel_ratio)) for c in pyramid_channels
            )
            if len(widths) != 4:
                raise ProjectorError(f"level_widths must have 4 entries: {widths}")
            self.out_channels = tuple(widths)
            with torch.random.fork_rng():
                torch.manual_seed(cfg.seed)
                self._build_mixing()
        if not cfg.trainable:
            self.requires_grad_(False)

    def _build_mixing(self):
        cfg = self.cfg
        self.ccm = nn.ModuleList(
            nn.Conv2d(cin, cout, 1, bias=False)
            for cin, cout in zip(self.in_channels, self.out_channels)
        )
        for conv in self.ccm:
            if cfg.init == "rotation":
                conv.weight.data = _random_rotation(conv.out_channels).view(
                    conv.out_channels, conv.in_channels, 1, 1
                )
            else:
                nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
        if cfg.mode == "ccm_csm":
            w = self.out_channels
            self.res_a = nn.ModuleList(_ResBlock3x3(c) for c in w)
            self.res_b = nn.ModuleList(_ResBlock3x3(c) for c in w)
            # 1x1 convolutions on the upsampled top-down path align each
            # deeper level's width with the level above it.
            self.up_conv = nn.ModuleList(
                nn.Conv2d(w[i + 1], w[i], 1, bias=False) for i in range(3)
            )
            for block in (*self.res_a, *self.res_b):
                nn.init.kaiming_normal_(
                    block.conv.weight, mode="fan_in", nonlinearity="relu"
                )
            for conv in self.up_conv:
                nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        return project(self, pyramid)


def build_projector(
    pyramid_channels: tuple[int, ...], cfg: ProjectionConfig
) -> ProjectionSet:
    """Deterministic given ``cfg.seed``; parameters frozen unless trainable."""
    return ProjectionSet(pyramid_channels, cfg)


def project(proj: ProjectionSet, pyramid: FeaturePyramid) -> FeaturePyramid:
    """Map a pyramid to the discriminators' input space."""
    if pyramid.channels != proj.in_channels:
        raise ProjectorError(
            f"pyramid channels {pyramid.channels} do not match "
            f"build-time channels {proj.in_channels}"
        )
    mode = proj.cfg.mode
    levels = pyramid.levels
    if mode == "none":
        return pyramid
    if mode == "feature_norm":
        return FeaturePyramid(tuple(_standardize(x) for x in levels))
    mixed = [conv(x) for conv, x in zip(proj.ccm, levels)]
    if mode == "ccm":
        return FeaturePyramid(tuple(mixed))
    # Top-down fusion, deepest level first; each fused map keeps its own
    # resolution and feeds both its discriminator and the next level up.
    fused = [None, None, None, None]
    t = proj.res_b[3](proj.res_a[3](mixed[3]))
    fused[3] = t
    for i in (2, 1, 0):
        up = F.interpolate(t, scale_factor=2, mode="bilinear", align_corners=False)
        up = proj.up_conv[i](up)
        t = proj.res_b[i](proj.res_a[i](up) + mixed[i])
        fused[i] = t
    return FeaturePyramid(tuple(fused))


def projector_fingerprint(proj: ProjectionSet) -> str:
    """Stable content hash of all projection parameters."""
    return fingerprint(proj)


def _standardize(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    # Per-channel statistics over batch and space; empty batches pass through.
    if x.shape[0] == 0:
        return x
    mean = x.mean(dim=(0, 2, 3), keepdim=True)
    std = x.std(dim=(0, 2, 3), keepdim=True)
    return (x - mean) / (std + eps)


def _random_rotation(n: int) -> torch.Tensor:
    # QR of a Gaussian matrix with sign fix gives a Haar-uniform orthogonal
    # matrix; its rows/columns are orthonormal by construction.
    a = torch.randn(n, n, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r))
    return q.to(torch.float32)
