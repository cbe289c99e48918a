"""Frozen image backbones exposing a four-level feature pyramid.

A feature network is loaded once, frozen (parameters never receive optimizer
updates, batch-norm statistics never update), and used purely as a
differentiable map from images in [-1, 1] to four feature maps at strides
4, 8, 16 and 32. Gradients flow through the network to its inputs.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# EfficientNet-lite checkpoints consume inputs scaled to [-1, 1] directly.
UNIT_MEAN = (0.5, 0.5, 0.5)
UNIT_STD = (0.5, 0.5, 0.5)

PYRAMID_STRIDES = (4, 8, 16, 32)


class FeatureNetError(ValueError):
    """Invalid spec, unknown architecture, or unusable weight file."""


@dataclass(frozen=True)
class FeatureNetworkSpec:
    """Which backbone to build and how to feed it.

    ``normalization`` maps generator/dataset images in [-1, 1] to the
    backbone's expected input statistics; ``None`` selects the backbone's
    published preprocessing.
    """

    architecture_id: str = "efficientnet_lite1"
    input_resolution: int = 256
    pretrained: bool = False
    seed: int | None = None
    weights_path: str | None = None
    weights_sha256: str | None = None
    normalization: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    def validate(self) -> None:
        if self.architecture_id not in ARCHITECTURES:
            raise FeatureNetError(
                f"unknown architecture_id {self.architecture_id!r}; "
                f"known: {sorted(ARCHITECTURES)}"
            )
        r = self.input_resolution
        if r < 64 or (r & (r - 1)) != 0:
            raise FeatureNetError(
                f"input_resolution must be a power of two >= 64, got {r}"
            )
        if self.pretrained:
            if self.weights_path is None or self.weights_sha256 is None:
                raise FeatureNetError(
                    "pretrained=True requires weights_path and weights_sha256"
                )
        elif self.seed is None:
            raise FeatureNetError("pretrained=False requires a seed")


@dataclass(frozen=True)
class FeaturePyramid:
    """Ordered feature maps at strides 4, 8, 16, 32 of the input."""

    levels: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ValueError(f"expected 4 levels, got {len(self.levels)}")
        for a, b in zip(self.levels, self.levels[1:]):
            if a.shape[-1] != 2 * b.shape[-1] or a.shape[-2] != 2 * b.shape[-2]:
                raise ValueError(
                    "pyramid resolutions must halve level to level: "
                    f"{[tuple(t.shape) for t in self.levels]}"
                )

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(t.shape[1] for t in self.levels)

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(t.shape[-1] for t in self.levels)


def _conv_bn_act(cin, cout, k, stride, groups=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride, k // 2, groups=groups, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU6(inplace=True),
    )


class _MBConvLite(nn.Module):
    """Inverted residual block, lite flavor: no squeeze-excitation, ReLU6."""

    def __init__(self, cin, cout, kernel, stride, expand):
        super().__init__()
        mid = cin * expand
        layers = []
        if expand != 1:
            layers.append(_conv_bn_act(cin, mid, 1, 1))
        layers.append(_conv_bn_act(mid, mid, kernel, stride, groups=mid))
        layers.append(
            nn.Sequential(
                nn.Conv2d(mid, cout, 1, 1, 0, bias=False), nn.BatchNorm2d(cout)
            )
        )
        self.block = nn.Sequential(*layers)
        self.use_skip = stride == 1 and cin == cout

    def forward(self, x):
        out = self.block(x)
        return x + out if self.use_skip else out


# (expand, channels, repeats, stride, kernel) per stage; lite keeps the stem at
# 32 channels and does not depth-scale the first and last stage.
_EFFNET_STAGES = (
    (1, 16, 1, 1, 3),
    (6, 24, 2, 2, 3),
    (6, 40, 2, 2, 5),
    (6, 80, 3, 2, 3),
    (6, 112, 3, 1, 5),
    (6, 192, 4, 2, 5),
    (6, 320, 1, 1, 3),
)


class _EfficientNetLite(nn.Module):
    """Stage stack of EfficientNet-lite; the classifier head is omitted."""

    def __init__(self, depth_mult: float):
        super().__init__()
        self.stem = _conv_bn_act(3, 32, 3, 2)
        stages = []
        cin = 32
        n_stages = len(_EFFNET_STAGES)
        for i, (expand, cout, repeats, stride, kernel) in enumerate(_EFFNET_STAGES):
            if 0 < i < n_stages - 1:
                repeats = int(math.ceil(repeats * depth_mult))
            blocks = []
            for j in range(repeats):
                blocks.append(
                    _MBConvLite(cin, cout, kernel, stride if j == 0 else 1, expand)
                )
                cin = cout
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    def forward_taps(self, x, tap_indices):
        x = self.stem(x)
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i in tap_indices:
                feats.append(x)
        return feats


class _TinyCNN(nn.Module):
    """Small strided CNN used for desk-scale experiments and tests."""

    def __init__(self, widths=(16, 32, 64, 128)):
        super().__init__()
        self.stages = nn.ModuleList()
        cin = 3
        for i, w in enumerate(widths):
            stride_total = 4 if i == 0 else 2
            blocks = [_conv_bn_act(cin, w, 3, 2)]
            if stride_total == 4:
                blocks.append(_conv_bn_act(w, w, 3, 2))
            blocks.append(_conv_bn_act(w, w, 3, 1))
            self.stages.append(nn.Sequential(*blocks))
            cin = w
        self.widths = tuple(widths)

    def forward_taps(self, x, tap_indices):
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i in tap_indices:
                feats.append(x)
        return feats


class _ResNetTaps(nn.Module):
    def __init__(self, variant: str):
        super().__init__()
        import torchvision.models as tvm

        net = {"resnet18": tvm.resnet18, "resnet50": tvm.resnet50}[variant](
            weights=None
        )
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.ModuleList(
            [net.layer1, net.layer2, net.layer3, net.layer4]
        )

    def forward_taps(self, x, tap_indices):
        x = self.stem(x)
        feats = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in tap_indices:
                feats.append(x)
        return feats


class _ViTTaps(nn.Module):
    """Transformer taps with a dense-prediction style readout.

    Token grids from the tapped blocks are reassembled to 2-D at stride 16
    and bilinearly resampled to the four pyramid strides; class tokens are
    dropped.
    """

    def __init__(self, image_size, hidden_dim, num_heads, blocks=(3, 6, 9, 12)):
        super().__init__()
        from torchvision.models.vision_transformer import VisionTransformer

        self.vit = VisionTransformer(
            image_size=image_size,
            patch_size=16,
            num_layers=max(blocks),
            num_heads=num_heads,
            hidden_dim=hidden_dim,
            mlp_dim=hidden_dim * 4,
        )
        self.blocks = blocks
        self.image_size = image_size

    def forward_taps(self, x, tap_indices):
        del tap_indices  # transformer taps are block indices, fixed at build
        vit = self.vit
        n = x.shape[0]
        tokens = vit._process_input(x)
        cls = vit.class_token.expand(n, -1, -1)
        tokens = torch.cat([cls, tokens], dim=1)
        tokens = tokens + vit.encoder.pos_embedding
        tokens = vit.encoder.dropout(tokens)
        grid = self.image_size // 16
        taps = []
        for i, block in enumerate(vit.encoder.layers):
            tokens = block(tokens)
            if (i + 1) in self.blocks:
                spatial = tokens[:, 1:, :]
                fmap = spatial.transpose(1, 2).reshape(n, -1, grid, grid)
                taps.append(fmap)
        feats = []
        for fmap, stride in zip(taps, PYRAMID_STRIDES):
            size = self.image_size // stride
            if size != grid:
                fmap = F.interpolate(
                    fmap, size=(size, size), mode="bilinear", align_corners=False
                )
            feats.append(fmap)
        return feats


@dataclass(frozen=True)
class _ArchInfo:
    build: callable
    channels: tuple[int, ...]
    layer_ids: tuple
    tap_indices: tuple[int, ...]
    normalization: tuple[tuple[float, ...], tuple[float, ...]]


def _lite_channels():
    return (24, 40, 112, 320)


ARCHITECTURES: dict[str, _ArchInfo] = {
    "efficientnet_lite0": _ArchInfo(
        build=lambda spec: _EfficientNetLite(1.0),
        channels=_lite_channels(),
        layer_ids=("stage2", "stage3", "stage5", "stage7"),
        tap_indices=(1, 2, 4, 6),
        normalization=(UNIT_MEAN, UNIT_STD),
    ),
    "efficientnet_lite1": _ArchInfo(
        build=lambda spec: _EfficientNetLite(1.1),
        channels=_lite_channels(),
        layer_ids=("stage2", "stage3", "stage5", "stage7"),
        tap_indices=(1, 2, 4, 6),
        normalization=(UNIT_MEAN, UNIT_STD),
    ),
    "resnet18": _ArchInfo(
        build=lambda spec: _ResNetTaps("resnet18"),
        channels=(64, 128, 256, 512),
        layer_ids=("layer1", "layer2", "layer3", "layer4"),
        tap_indices=(0, 1, 2, 3),
        normalization=(IMAGENET_MEAN, IMAGENET_STD),
    ),
    "resnet50": _ArchInfo(
        build=lambda spec: _ResNetTaps("resnet50"),
        channels=(256, 512, 1024, 2048),
        layer_ids=("layer1", "layer2", "layer3", "layer4"),
        tap_indices=(0, 1, 2, 3),
        normalization=(IMAGENET_MEAN, IMAGENET_STD),
    ),
    "vit_base": _ArchInfo(
        build=lambda spec: _ViTTaps(spec.input_resolution, 768, 12),
        channels=(768, 768, 768, 768),
        layer_ids=(3, 6, 9, 12),
        tap_indices=(),
        normalization=(IMAGENET_MEAN, IMAGENET_STD),
    ),
    "deit_small": _ArchInfo(
        build=lambda spec: _ViTTaps(spec.input_resolution, 384, 6),
        channels=(384, 384, 384, 384),
        layer_ids=(3, 6, 9, 12),
        tap_indices=(),
        normalization=(IMAGENET_MEAN, IMAGENET_STD),
    ),
    "tiny_debug": _ArchInfo(
        build=lambda spec: _TinyCNN(),
        channels=(16, 32, 64, 128),
        layer_ids=("stage1", "stage2", "stage3", "stage4"),
        tap_indices=(0, 1, 2, 3),
        normalization=(UNIT_MEAN, UNIT_STD),
    ),
    # Two-stage net kept in the registry to exercise the unsupported-taps path.
    "shallow_debug": _ArchInfo(
        build=lambda spec: _TinyCNN(widths=(8, 16)),
        channels=(8, 16),
        layer_ids=("stage1", "stage2"),
        tap_indices=(0, 1),
        normalization=(UNIT_MEAN, UNIT_STD),
    ),
}


def select_layers(architecture_id: str):
    """Return the four tap-point identifiers for a supported backbone."""
    if architecture_id not in ARCHITECTURES:
        raise FeatureNetError(f"unknown architecture_id {architecture_id!r}")
    info = ARCHITECTURES[architecture_id]
    if len(info.layer_ids) != 4:
        raise FeatureNetError(
            f"{architecture_id} exposes {len(info.layer_ids)} stages; "
            "a feature pyramid needs 4 distinct tap points"
        )
    return info.layer_ids


class FeatureNetwork(nn.Module):
    """A frozen backbone plus input normalization; read-only after build."""

    def __init__(self, spec: FeatureNetworkSpec):
        super().__init__()
        spec.validate()
        select_layers(spec.architecture_id)
        info = ARCHITECTURES[spec.architecture_id]
        self.spec = spec
        self.pyramid_channels = info.channels
        self.layer_ids = info.layer_ids
        self._tap_indices = info.tap_indices
        # fork_rng keeps construction from disturbing the caller's RNG stream.
        with torch.random.fork_rng():
            torch.manual_seed(spec.seed if spec.seed is not None else 0)
            self.backbone = info.build(spec)
        if spec.pretrained:
            state = _load_checked_state_dict(spec.weights_path, spec.weights_sha256)
            self.backbone.load_state_dict(state)
        mean, std = spec.normalization or info.normalization
        self.register_buffer("input_mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("input_std", torch.tensor(std).view(1, -1, 1, 1))
        self.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True):
        # Frozen contract: batch-norm statistics are part of the state and
        # must never see training-mode updates.
        return super().train(False)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        return extract_pyramid(self, images)


def load_feature_network(spec: FeatureNetworkSpec) -> FeatureNetwork:
    """Build a frozen feature network from its spec."""
    return FeatureNetwork(spec)


def extract_pyramid(net: FeatureNetwork, images: torch.Tensor) -> FeaturePyramid:
    """Map an image batch in [-1, 1] to the four-level feature pyramid."""
    r = net.spec.input_resolution
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[-2:] != (r, r):
        raise FeatureNetError(
            f"expected images of shape (B, 3, {r}, {r}), got {tuple(images.shape)}"
        )
    if not torch.isfinite(images).all():
        raise FeatureNetError("non-finite values in input images")
    x01 = (images + 1.0) * 0.5
    x = (x01 - net.input_mean) / net.input_std
    feats = net.backbone.forward_taps(x, net._tap_indices)
    return FeaturePyramid(levels=tuple(feats))


def randomize_weights(net: FeatureNetwork, seed: int) -> FeatureNetwork:
    """Same architecture, freshly initialized from ``seed``, still frozen."""
    spec = replace(
        net.spec, pretrained=False, seed=seed, weights_path=None, weights_sha256=None
    )
    return FeatureNetwork(spec)


def fingerprint(module: nn.Module) -> str:
    """Content hash of all parameters and buffers (order-stable)."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        t = state[name]
        h.update(name.encode())
        if isinstance(t, torch.Tensor):
            h.update(str(t.dtype).encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(t).encode())
    return h.hexdigest()


def _load_checked_state_dict(path: str, expected_sha256: str) -> dict:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise FeatureNetError(f"cannot read weight file {path}: {e}") from e
    digest = hashlib.sha256(raw).hexdigest()
    if digest != expected_sha256:
        raise FeatureNetError(
            f"weight-file checksum mismatch for {path}: "
            f"expected {expected_sha256}, got {digest}"
        )
    return torch.load(io.BytesIO(raw), map_location="cpu", weights_only=True)
