"""Manifold precision and recall via k-nearest-neighbor hyperspheres.

A point is covered by a set if it lies within the k-th-neighbor radius of
some point of that set. Precision is the covered fraction of generated
points under the real manifold estimate; recall is the covered fraction of
real points under the generated one.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .frechet import MetricError


def _knn_radii(features: np.ndarray, k: int) -> np.ndarray:
    # Distance to the k-th nearest OTHER point: (k+1)-th including self.
    dists = cdist(features, features)
    return np.sort(dists, axis=1)[:, k]


def _covered(points: np.ndarray, manifold: np.ndarray, radii: np.ndarray) -> np.ndarray:
    dists = cdist(points, manifold)
    return (dists <= radii[None, :]).any(axis=1)


def precision_recall(
    real_features: np.ndarray, fake_features: np.ndarray, k: int = 3
) -> tuple[float, float]:
    """Covered fractions (precision, recall), each in [0, 1]."""
    real = np.asarray(real_features, dtype=np.float64)
    fake = np.asarray(fake_features, dtype=np.float64)
    for name, arr in (("real", real), ("fake", fake)):
        if arr.ndim != 2 or arr.shape[0] < k + 1:
            raise MetricError(
                f"{name} set needs at least k+1={k + 1} points, got shape {arr.shape}"
            )
    real_radii = _knn_radii(real, k)
    fake_radii = _knn_radii(fake, k)
    precision = float(_covered(fake, real, real_radii).mean())
    recall = float(_covered(real, fake, fake_radii).mean())
    return precision, recall
