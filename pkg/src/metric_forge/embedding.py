"""Embedding batches, L2 normalization and pairwise Euclidean distances."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NormalizeZeroVector

ZERO_NORM = 1e-12


@dataclass(frozen=True)
class EmbeddingBatch:
    """B feature rows of dimension D with class and camera labels.

    ``camera_ids`` defaults to -1 for every row (no camera information).
    """

    features: np.ndarray
    class_ids: np.ndarray
    camera_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"features must be a non-empty B x D matrix, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite entries")
        cls = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        cams = self.camera_ids
        cams = np.full(len(feats), -1, dtype=np.int64) if cams is None else np.asarray(cams, dtype=np.int64).reshape(-1)
        if len(cls) != len(feats) or len(cams) != len(feats):
            raise ValueError("class_ids and camera_ids must have one entry per feature row")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "class_ids", cls)
        object.__setattr__(self, "camera_ids", cams)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "EmbeddingBatch":
        idx = np.asarray(idx)
        return EmbeddingBatch(self.features[idx], self.class_ids[idx], self.camera_ids[idx])

    def with_features(self, features) -> "EmbeddingBatch":
        return replace(self, features=features)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Divide each row of ``x`` by its Euclidean norm."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] <= ZERO_NORM)
    if bad.size:
        raise NormalizeZeroVector(f"rows {bad.tolist()} have norm <= {ZERO_NORM}")
    return x / norms


def l2_normalize(batch: EmbeddingBatch) -> EmbeddingBatch:
    return batch.with_features(normalize_rows(batch.features))


def cross_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``a`` and rows of ``b``.

    Uses the explicit difference norm; the Gram identity loses precision
    near zero and can produce negative radicands.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def distance_matrix(features: np.ndarray) -> np.ndarray:
    d = cross_distances(features, features)
    # symmetric by construction up to summation order; force it exactly
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def pairwise_distances(batch: EmbeddingBatch) -> np.ndarray:
    """B x B matrix of Euclidean distances between the batch rows."""
    return distance_matrix(batch.features)
