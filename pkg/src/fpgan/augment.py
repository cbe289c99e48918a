"""Differentiable stochastic augmentation applied before the feature network.

All ops are differentiable with respect to pixel values (no clamping), so the
composed map projection-after-augmentation keeps gradients flowing to the
generator. Parameters are drawn independently per image; real and fake
batches never share draws.

Op parameter ranges follow the differentiable-augmentation reference this
pipeline adopts: brightness shift U(-0.5, 0.5), saturation scale U(0, 2),
contrast scale U(0.5, 1.5), translation up to 1/8 of the resolution with
zero padding, cutout squares of half the resolution zeroed in place
(zero is mid-gray for images in [-1, 1]).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

KNOWN_OPS = ("color", "translation", "cutout")


class AugmentError(ValueError):
    pass


class GradientCheckError(RuntimeError):
    """Raised when an op's analytic gradient disagrees with finite differences."""


@dataclass(frozen=True)
class AugmentPolicy:
    ops: tuple[str, ...] = KNOWN_OPS
    probability: float = 1.0
    brightness: float = 0.5
    saturation: float = 1.0
    contrast: float = 0.5
    translation_ratio: float = 0.125
    cutout_ratio: float = 0.5

    def validate(self) -> None:
        unknown = [op for op in self.ops if op not in KNOWN_OPS]
        if unknown:
            raise AugmentError(f"unknown ops {unknown}; known: {KNOWN_OPS}")
        if not 0.0 <= self.probability <= 1.0:
            raise AugmentError(f"probability must be in [0, 1], got {self.probability}")
        for name in ("brightness", "saturation", "contrast"):
            if getattr(self, name) < 0:
                raise AugmentError(f"{name} range must be non-negative")
        if not 0.0 <= self.translation_ratio <= 0.5:
            raise AugmentError("translation_ratio must be in [0, 0.5]")
        if not 0.0 <= self.cutout_ratio <= 1.0:
            raise AugmentError("cutout_ratio must be in [0, 1]")


@dataclass
class AugmentParams:
    """One fixed draw of augmentation parameters for a batch."""

    ops: tuple[str, ...]
    resolution: int
    gates: dict[str, torch.Tensor] = field(default_factory=dict)
    brightness: torch.Tensor | None = None
    saturation: torch.Tensor | None = None
    contrast: torch.Tensor | None = None
    shifts: torch.Tensor | None = None  # (B, 2) integer pixel shifts
    cutout_centers: torch.Tensor | None = None  # (B, 2) integer offsets
    cutout_size: int = 0


def sample_params(
    policy: AugmentPolicy,
    batch_size: int,
    resolution: int,
    rng: torch.Generator,
) -> AugmentParams:
    """Draw per-image augmentation parameters; independent across images."""
    policy.validate()
    p = AugmentParams(ops=tuple(policy.ops), resolution=resolution)
    for op in policy.ops:
        gate = (torch.rand(batch_size, generator=rng) < policy.probability).float()
        p.gates[op] = gate
    b = batch_size
    if "color" in policy.ops:
        u = lambda: torch.rand(b, 1, 1, 1, generator=rng)
        p.brightness = (u() * 2 - 1) * policy.brightness
        p.saturation = 1.0 + (u() * 2 - 1) * policy.saturation
        p.contrast = 1.0 + (u() * 2 - 1) * policy.contrast
    if "translation" in policy.ops:
        s = int(resolution * policy.translation_ratio + 0.5)
        p.shifts = torch.randint(-s, s + 1, (b, 2), generator=rng)
    if "cutout" in policy.ops:
        size = int(resolution * policy.cutout_ratio + 0.5)
        p.cutout_size = size
        hi = resolution + (1 - size % 2)
        p.cutout_centers = torch.randint(0, max(hi, 1), (b, 2), generator=rng)
    return p


def apply_params(images: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    """Apply a fixed parameter draw; differentiable w.r.t. ``images``."""
    x = images
    if x.shape[-1] != params.resolution:
        raise AugmentError(
            f"params drawn for resolution {params.resolution}, got {x.shape[-1]}"
        )
    for op in params.ops:
        gate = params.gates[op].to(x.dtype)
        if gate.numel() and gate.sum() == 0:
            continue
        if op == "color":
            x = _gated(_color(x, params), x, gate)
        elif op == "translation":
            x = _gated(_translate(x, params.shifts), x, gate)
        elif op == "cutout":
            x = _gated(_cutout(x, params), x, gate)
    return x


def augment(
    images: torch.Tensor, policy: AugmentPolicy, rng: torch.Generator
) -> torch.Tensor:
    """Sample fresh parameters and apply them."""
    params = sample_params(policy, images.shape[0], images.shape[-1], rng)
    return apply_params(images, params)


def _gated(augmented, original, gate):
    keep = gate.view(-1, 1, 1, 1).bool()
    return torch.where(keep, augmented, original)


def _color(x, p):
    x = x + p.brightness.to(x.dtype)
    mean_c = x.mean(dim=1, keepdim=True)
    x = (x - mean_c) * p.saturation.to(x.dtype) + mean_c
    mean_all = x.mean(dim=(1, 2, 3), keepdim=True)
    return (x - mean_all) * p.contrast.to(x.dtype) + mean_all


def _translate(x, shifts):
    b, _, h, w = x.shape
    dev = x.device
    gb, gx, gy = torch.meshgrid(
        torch.arange(b, device=dev),
        torch.arange(h, device=dev),
        torch.arange(w, device=dev),
        indexing="ij",
    )
    # A one-pixel zero border absorbs every out-of-range read after clamping,
    # which implements zero padding for arbitrary shift magnitudes.
    shifts = shifts.to(dev)
    gx = torch.clamp(gx + shifts[:, 0].view(-1, 1, 1) + 1, 0, h + 1)
    gy = torch.clamp(gy + shifts[:, 1].view(-1, 1, 1) + 1, 0, w + 1)
    padded = F.pad(x, [1, 1, 1, 1])
    return padded.permute(0, 2, 3, 1)[gb, gx, gy].permute(0, 3, 1, 2)


def _cutout(x, p):
    b, _, h, w = x.shape
    size = p.cutout_size
    if size == 0:
        return x
    dev = x.device
    gb, gx, gy = torch.meshgrid(
        torch.arange(b, device=dev),
        torch.arange(size, device=dev),
        torch.arange(size, device=dev),
        indexing="ij",
    )
    centers = p.cutout_centers.to(dev)
    px = torch.clamp(gx + centers[:, 0].view(-1, 1, 1) - size // 2, 0, h - 1)
    py = torch.clamp(gy + centers[:, 1].view(-1, 1, 1) - size // 2, 0, w - 1)
    mask = torch.ones(b, h, w, dtype=x.dtype, device=dev)
    mask[gb, px, py] = 0
    return x * mask.unsqueeze(1)


def gradient_check(
    policy: AugmentPolicy,
    resolution: int = 8,
    rel_tol: float = 1e-2,
    seed: int = 0,
) -> dict[str, dict]:
    """Compare analytic pixel gradients against central finite differences.

    Each enabled op is checked in isolation at a fixed parameter draw on a
    small double-precision image. Raises GradientCheckError if any op's
    normalized maximum error exceeds ``rel_tol``.
    """
    policy.validate()
    report = {}
    failures = []
    rng = torch.Generator().manual_seed(seed)
    for op in policy.ops:
        single = AugmentPolicy(
            ops=(op,),
            probability=1.0,
            brightness=policy.brightness,
            saturation=policy.saturation,
            contrast=policy.contrast,
            translation_ratio=policy.translation_ratio,
            cutout_ratio=policy.cutout_ratio,
        )
        params = sample_params(single, 1, resolution, rng)
        x = (torch.rand(1, 3, resolution, resolution, generator=rng) * 1.6 - 0.8).to(
            torch.float64
        )
        weights = torch.randn(
            1, 3, resolution, resolution, generator=rng, dtype=torch.float64
        )
        err = _max_relative_gradient_error(x, weights, params)
        passed = err <= rel_tol
        report[op] = {"max_rel_err": err, "passed": passed}
        if not passed:
            failures.append(f"{op}: {err:.3e} > {rel_tol}")
    if failures:
        raise GradientCheckError("; ".join(failures))
    return report


def _max_relative_gradient_error(x, weights, params, h=1e-4):
    x = x.clone().requires_grad_(True)
    loss = (apply_params(x, params) * weights).sum()
    (analytic,) = torch.autograd.grad(loss, x)
    fd = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.numel()):
        for sign in (1.0, -1.0):
            bumped = flat.clone()
            bumped[i] += sign * h
            val = (apply_params(bumped.reshape(x.shape), params) * weights).sum()
            fd_flat[i] += sign * val
    fd = fd / (2 * h)
    scale = max(fd.abs().max().item(), analytic.abs().max().item(), 1e-8)
    return ((analytic - fd).abs().max() / scale).item()
