"""Evaluation suite: Fréchet distance on pluggable feature spaces, kernel
distance, manifold precision/recall, and sliced Wasserstein distance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .features import (
    BackbonePooledSpace,
    MissingWeightsError,
    PixelFeatureSpace,
    TorchScriptFeatureSpace,
    extract_features,
    get_or_compute_real_stats,
    layer_pooled_features,
    load_stats,
    parse_feature_space,
    save_stats,
    stats_cache_path,
)
from .frechet import (
    GaussianStats,
    MetricError,
    fid,
    frechet_distance,
    gaussian_stats,
    rel_fd,
)
from .kid import kid, polynomial_kernel
from .prec_recall import precision_recall
from .swd import swd, swd_levels


@dataclass
class MetricsReport:
    """Per-snapshot record of the evaluation metrics."""

    imgs: int
    fid: float | None = None
    kid: float | None = None
    precision: float | None = None
    recall: float | None = None
    swd: float | None = None
    rel_fd: dict | None = None

    def validate(self) -> None:
        for name in ("fid", "kid", "precision", "recall", "swd"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise MetricError(f"{name} is non-finite: {v}")
        if self.rel_fd is not None:
            for layer, v in self.rel_fd.items():
                if not math.isfinite(v):
                    raise MetricError(f"rel_fd[{layer}] is non-finite: {v}")

    def to_record(self) -> dict:
        self.validate()
        record = {"imgs": self.imgs}
        for name in ("fid", "kid", "precision", "recall", "swd"):
            v = getattr(self, name)
            if v is not None:
                record[name] = v
        if self.rel_fd is not None:
            record["rel_fd"] = {str(k): v for k, v in self.rel_fd.items()}
        return record


__all__ = [
    "BackbonePooledSpace",
    "GaussianStats",
    "MetricError",
    "MetricsReport",
    "MissingWeightsError",
    "PixelFeatureSpace",
    "TorchScriptFeatureSpace",
    "extract_features",
    "fid",
    "frechet_distance",
    "gaussian_stats",
    "get_or_compute_real_stats",
    "kid",
    "layer_pooled_features",
    "load_stats",
    "parse_feature_space",
    "polynomial_kernel",
    "precision_recall",
    "rel_fd",
    "save_stats",
    "stats_cache_path",
    "swd",
    "swd_levels",
]
