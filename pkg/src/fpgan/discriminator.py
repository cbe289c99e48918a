"""Bank of independent spectral-normalized convolutional discriminators.

One discriminator per projected pyramid level. Every convolution is
spectral-normalized (one power-iteration step per training forward), and
down-sampling blocks halve the resolution until the features reach 4x4,
where a k=4 valid convolution emits one scalar logit per image.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

LogitSet = dict[int, torch.Tensor]


class DiscriminatorError(ValueError):
    pass


def spectral_normalize(
    weight: torch.Tensor,
    u: torch.Tensor,
    update_state: bool = True,
    eps: float = 1e-12,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One power-iteration step; returns (weight / sigma_hat, new u).

    ``u`` is the persistent left singular-vector estimate (length
    ``weight.shape[0]``). A zero weight clamps sigma to ``eps`` so the
    normalized weight stays finite (and zero).
    """
    flat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        v = F.normalize(flat.t().mv(u), dim=0, eps=eps)
        if update_state:
            u = F.normalize(flat.mv(v), dim=0, eps=eps)
    sigma = torch.dot(u, flat.mv(v)).clamp(min=eps)
    return weight / sigma, u


class SpectralConv2d(nn.Module):
    """Conv2d whose weight is divided by its estimated largest singular value."""

    def __init__(self, cin, cout, kernel, stride=1, padding=0, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin, kernel, kernel))
        nn.init.kaiming_normal_(self.weight, a=0.2, nonlinearity="leaky_relu")
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = padding
        u = F.normalize(torch.randn(cout), dim=0)
        self.register_buffer("power_iter_u", u)

    def normalized_weight(self) -> torch.Tensor:
        # The singular-vector estimate only advances in training mode so that
        # evaluation forwards are deterministic.
        w, u = spectral_normalize(
            self.weight, self.power_iter_u, update_state=self.training
        )
        if self.training:
            with torch.no_grad():
                self.power_iter_u.copy_(u)
        return w

    def warm_up(self, iterations: int = 20) -> None:
        with torch.no_grad():
            for _ in range(iterations):
                _, u = spectral_normalize(self.weight, self.power_iter_u)
                self.power_iter_u.copy_(u)

    def forward(self, x):
        return F.conv2d(
            x, self.normalized_weight(), self.bias, self.stride, self.padding
        )


class DownBlock(nn.Module):
    """Spectral-normalized k=4 s=2 convolution + BatchNorm + LeakyReLU(0.2)."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = SpectralConv2d(cin, cout, 4, 2, 1, bias=False)
        self.norm = nn.BatchNorm2d(cout)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class SingleDiscriminator(nn.Module):
    """DownBlocks from the level resolution to 4x4, then a 1-logit head.

    Channel widths double block to block and end at 512, matching the
    reference architecture at every input resolution >= 8. Levels already at
    or below 4x4 get no DownBlocks; the head kernel shrinks to the remaining
    spatial size.
    """

    def __init__(self, in_channels: int, resolution: int):
        super().__init__()
        if resolution < 2 or (resolution & (resolution - 1)) != 0:
            raise DiscriminatorError(
                f"level resolution must be a power of two >= 2, got {resolution}"
            )
        n_blocks = max(int(math.log2(resolution / 4)), 0)
        widths = [512 >> (n_blocks - 1 - j) for j in range(n_blocks)]
        blocks = []
        cin = in_channels
        for w in widths:
            blocks.append(DownBlock(cin, w))
            cin = w
        self.blocks = nn.Sequential(*blocks)
        head_kernel = min(resolution, 4)
        self.head = SpectralConv2d(cin, 1, head_kernel, 1, 0, bias=False)
        self.in_channels = in_channels
        self.resolution = resolution
        self.widths = tuple(widths)

    def forward(self, x) -> torch.Tensor:
        if x.shape[1] != self.in_channels or x.shape[-1] != self.resolution:
            raise DiscriminatorError(
                f"expected input (B, {self.in_channels}, {self.resolution}, "
                f"{self.resolution}), got {tuple(x.shape)}"
            )
        return self.head(self.blocks(x)).reshape(x.shape[0])


class DiscriminatorSet(nn.Module):
    """Independent discriminators keyed by pyramid level (1 = shallowest)."""

    def __init__(self, level_specs: dict[int, tuple[int, int]]):
        super().__init__()
        if not level_specs:
            raise DiscriminatorError("active_levels must be non-empty")
        self.levels = tuple(sorted(level_specs))
        self.discriminators = nn.ModuleDict(
            {
                str(level): SingleDiscriminator(channels, resolution)
                for level, (channels, resolution) in level_specs.items()
            }
        )

    def __getitem__(self, level: int) -> SingleDiscriminator:
        return self.discriminators[str(level)]

    def forward(self, inputs) -> LogitSet:
        return forward_logits(self, inputs)

    def warm_up(self, iterations: int = 20) -> None:
        for m in self.modules():
            if isinstance(m, SpectralConv2d):
                m.warm_up(iterations)


def build_discriminators(
    projected_channels: tuple[int, ...],
    level_resolutions: tuple[int, ...],
    active_levels=(1, 2, 3, 4),
) -> DiscriminatorSet:
    """Build discriminators for the configured subset of pyramid levels."""
    active = sorted(set(active_levels))
    if not active:
        raise DiscriminatorError("active_levels must be non-empty")
    bad = [l for l in active if l not in (1, 2, 3, 4)]
    if bad:
        raise DiscriminatorError(f"active_levels must be within 1..4, got {bad}")
    specs = {
        l: (projected_channels[l - 1], level_resolutions[l - 1]) for l in active
    }
    return DiscriminatorSet(specs)


def build_rgb_discriminator(resolution: int) -> DiscriminatorSet:
    """Single discriminator on raw RGB images (baseline training mode)."""
    return DiscriminatorSet({1: (3, resolution)})


def forward_logits(dset: DiscriminatorSet, projected) -> LogitSet:
    """One scalar logit per image per active discriminator."""
    if hasattr(projected, "levels"):
        inputs = {l: projected.levels[l - 1] for l in dset.levels}
    else:
        inputs = projected
    missing = [l for l in dset.levels if l not in inputs]
    if missing:
        raise DiscriminatorError(f"missing inputs for levels {missing}")
    return {l: dset[l](inputs[l]) for l in dset.levels}


def aggregate_logits(logits: LogitSet) -> torch.Tensor:
    """Elementwise sum of logits over discriminators."""
    if not logits:
        raise DiscriminatorError("cannot aggregate an empty LogitSet")
    values = [logits[l] for l in sorted(logits)]
    return torch.stack(values, dim=0).sum(dim=0)
