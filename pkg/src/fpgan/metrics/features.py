"""Evaluation feature spaces and the cached real-statistics store.

The Fréchet/kernel metrics are generic over the feature space: any object
with a ``space_id`` and an ``extract(images) -> (N, d)`` method works.
Besides raw-pixel and frozen-backbone spaces, a TorchScript loader accepts
externally supplied evaluation networks (Inception-style, or contrastive /
self-supervised ResNets) given a weight file.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..feature_net import (
    FeatureNetwork,
    FeatureNetworkSpec,
    extract_pyramid,
    load_feature_network,
)
from .frechet import GaussianStats, MetricError

STATS_CACHE_VERSION = 1
CACHE_ENV_VAR = "FPGAN_CACHE_DIR"


class MissingWeightsError(FileNotFoundError):
    """The designated evaluation network's weight file is unavailable."""


class PixelFeatureSpace:
    """Bilinearly downsampled raw pixels; weight-free and deterministic."""

    def __init__(self, resolution: int = 16):
        self.resolution = resolution
        self.space_id = f"pixels:{resolution}"

    def extract(self, images: torch.Tensor) -> np.ndarray:
        x = _resize(images, self.resolution)
        return x.reshape(x.shape[0], -1).numpy().astype(np.float64)


class BackbonePooledSpace:
    """Spatially pooled pyramid features of a frozen backbone, concatenated."""

    def __init__(self, net: FeatureNetwork):
        self.net = net
        spec = net.spec
        origin = spec.weights_sha256[:12] if spec.pretrained else f"seed{spec.seed}"
        self.space_id = (
            f"backbone:{spec.architecture_id}:{origin}:{spec.input_resolution}"
        )

    def extract(self, images: torch.Tensor) -> np.ndarray:
        x = _resize(images, self.net.spec.input_resolution)
        pyramid = extract_pyramid(self.net, x)
        pooled = [lvl.mean(dim=(2, 3)) for lvl in pyramid.levels]
        return torch.cat(pooled, dim=1).numpy().astype(np.float64)


class TorchScriptFeatureSpace:
    """A scripted feature extractor loaded from a checked weight file."""

    def __init__(self, path, sha256: str | None = None, resolution: int = 299):
        if path is None or not Path(path).exists():
            raise MissingWeightsError(
                f"evaluation-network weights not found at {path!r}"
            )
        raw = Path(path).read_bytes()
        digest = hashlib.sha256(raw).hexdigest()
        if sha256 is not None and digest != sha256:
            raise MetricError(
                f"evaluation-network checksum mismatch for {path}: "
                f"expected {sha256}, got {digest}"
            )
        self.module = torch.jit.load(str(path), map_location="cpu").eval()
        self.resolution = resolution
        self.space_id = f"torchscript:{Path(path).name}:{digest[:12]}"

    def extract(self, images: torch.Tensor) -> np.ndarray:
        x = _resize(images, self.resolution)
        out = self.module(x)
        return out.reshape(out.shape[0], -1).numpy().astype(np.float64)


def parse_feature_space(spec: str):
    """Resolve a feature-space id string.

    Forms: ``pixels[:RES]``, ``backbone:ARCH:SEED[:RES]``,
    ``torchscript:PATH[:SHA256]``.
    """
    parts = spec.split(":")
    kind = parts[0]
    if kind == "pixels":
        res = int(parts[1]) if len(parts) > 1 else 16
        return PixelFeatureSpace(res)
    if kind == "backbone":
        if len(parts) < 3:
            raise MetricError(f"backbone space needs ARCH and SEED: {spec!r}")
        arch, seed = parts[1], int(parts[2])
        res = int(parts[3]) if len(parts) > 3 else 64
        net = load_feature_network(
            FeatureNetworkSpec(
                architecture_id=arch, input_resolution=res, pretrained=False, seed=seed
            )
        )
        return BackbonePooledSpace(net)
    if kind == "torchscript":
        if len(parts) < 2:
            raise MetricError(f"torchscript space needs a path: {spec!r}")
        sha = parts[2] if len(parts) > 2 else None
        return TorchScriptFeatureSpace(parts[1], sha)
    raise MetricError(f"unknown feature space {spec!r}")


def extract_features(space, images, batch_size: int = 64) -> np.ndarray:
    """Run a feature space over an image tensor or iterable of batches."""
    chunks = []
    with torch.no_grad():
        if isinstance(images, torch.Tensor):
            for start in range(0, max(images.shape[0], 1), batch_size):
                batch = images[start : start + batch_size]
                if batch.shape[0]:
                    chunks.append(space.extract(batch))
        else:
            for batch in images:
                if batch.shape[0]:
                    chunks.append(space.extract(batch))
    if not chunks:
        raise MetricError("no images supplied for feature extraction")
    return np.concatenate(chunks, axis=0)


def layer_pooled_features(
    net: FeatureNetwork, images: torch.Tensor, batch_size: int = 64
) -> dict:
    """Per-layer spatially pooled features, keyed by the layer identifier."""
    per_layer = {layer: [] for layer in net.layer_ids}
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = _resize(
                images[start : start + batch_size], net.spec.input_resolution
            )
            pyramid = extract_pyramid(net, batch)
            for layer, lvl in zip(net.layer_ids, pyramid.levels):
                per_layer[layer].append(lvl.mean(dim=(2, 3)).numpy())
    return {
        layer: np.concatenate(parts, axis=0).astype(np.float64)
        for layer, parts in per_layer.items()
    }


def _resize(images: torch.Tensor, resolution: int) -> torch.Tensor:
    if images.shape[-1] == resolution and images.shape[-2] == resolution:
        return images
    return F.interpolate(
        images, size=(resolution, resolution), mode="bilinear", align_corners=False
    )


# -- real-statistics cache ---------------------------------------------------


def default_cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV_VAR, Path.home() / ".cache" / "fpgan"))


def stats_cache_path(cache_root, dataset_hash: str, space_id: str, resolution: int):
    key = hashlib.sha256(f"{dataset_hash}|{space_id}|{resolution}".encode()).hexdigest()
    return Path(cache_root) / f"real_stats_{key[:24]}.npz"


def save_stats(path, stats: GaussianStats, space_id: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        version=STATS_CACHE_VERSION,
        space_id=np.array(space_id),
        mean=stats.mean,
        cov=stats.cov,
        count=stats.count,
    )


def load_stats(path) -> tuple[GaussianStats, str]:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["version"])
        if version != STATS_CACHE_VERSION:
            raise MetricError(
                f"stats cache version {version} unsupported "
                f"(expected {STATS_CACHE_VERSION})"
            )
        stats = GaussianStats(
            mean=z["mean"], cov=z["cov"], count=int(z["count"])
        )
        return stats, str(z["space_id"])


def get_or_compute_real_stats(
    cache_root, dataset_hash: str, space, resolution: int, images_fn
) -> GaussianStats:
    """Load cached real-set statistics or compute and cache them.

    ``images_fn`` is called only on a cache miss and must return the real
    images (tensor or iterable of batches).
    """
    path = stats_cache_path(cache_root, dataset_hash, space.space_id, resolution)
    if path.exists():
        stats, space_id = load_stats(path)
        if space_id == space.space_id:
            return stats
    from .frechet import gaussian_stats

    feats = extract_features(space, images_fn())
    stats = gaussian_stats(feats)
    save_stats(path, stats, space.space_id)
    return stats
