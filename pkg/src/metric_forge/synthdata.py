"""Seeded synthetic identity datasets and their CSV-style file format.

File layout::

    dim,n_samples,n_classes,n_cameras
    sample_id,class_id,camera_id,x_1,...,x_dim
    ...
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import EmbeddingBatch, normalize_rows
from .errors import ParseError


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 10
    per_class: int = 50
    dim: int = 16
    noise_sigma: float = 0.3
    n_cameras: int = 2
    seed: int = 0
    # cross-domain shift: rotate prototypes by a seeded orthogonal matrix, then offset samples
    domain_rotation_seed: int | None = None
    domain_offset: tuple | float | None = None

    def __post_init__(self):
        if self.n_classes < 2 or self.per_class < 2 or self.dim < 2:
            raise ValueError("n_classes, per_class and dim must all be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.n_cameras < 1:
            raise ValueError("n_cameras must be >= 1")


@dataclass
class SyntheticDataset:
    features: np.ndarray
    class_ids: np.ndarray
    camera_ids: np.ndarray
    sample_ids: np.ndarray
    n_classes: int
    n_cameras: int
    prototypes: np.ndarray | None = None

    def __len__(self):
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SyntheticDataset(self.features[idx], self.class_ids[idx], self.camera_ids[idx],
                                self.sample_ids[idx], self.n_classes, self.n_cameras, self.prototypes)

    def to_batch(self) -> EmbeddingBatch:
        return EmbeddingBatch(self.features, self.class_ids, self.camera_ids)

    def equals(self, other: "SyntheticDataset") -> bool:
        return (self.n_classes == other.n_classes and self.n_cameras == other.n_cameras
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.class_ids, other.class_ids)
                and np.array_equal(self.camera_ids, other.camera_ids)
                and np.array_equal(self.sample_ids, other.sample_ids))


def random_rotation(dim: int, seed: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign correction)."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def generate(spec: SynthSpec) -> SyntheticDataset:
    rng = np.random.default_rng(spec.seed)
    protos = normalize_rows(rng.normal(size=(spec.n_classes, spec.dim)))
    if spec.domain_rotation_seed is not None:
        protos = protos @ random_rotation(spec.dim, spec.domain_rotation_seed).T
    noise = rng.normal(scale=1.0, size=(spec.n_classes, spec.per_class, spec.dim)) * spec.noise_sigma
    feats = (protos[:, None, :] + noise).reshape(-1, spec.dim)
    if spec.domain_offset is not None:
        feats = feats + np.broadcast_to(np.asarray(spec.domain_offset, dtype=np.float64), (spec.dim,))
    class_ids = np.repeat(np.arange(spec.n_classes), spec.per_class)
    camera_ids = np.tile(np.arange(spec.per_class) % spec.n_cameras, spec.n_classes)
    return SyntheticDataset(feats, class_ids, camera_ids, np.arange(len(feats)),
                            spec.n_classes, spec.n_cameras, protos)


def train_heldout_split(ds: SyntheticDataset, heldout_fraction: float = 0.2):
    """Per class, the trailing ``heldout_fraction`` of samples become the held-out set."""
    train_idx, held_idx = [], []
    for c in np.unique(ds.class_ids):
        members = np.flatnonzero(ds.class_ids == c)
        n_held = int(round(len(members) * heldout_fraction))
        train_idx.extend(members[:len(members) - n_held])
        held_idx.extend(members[len(members) - n_held:])
    return ds.take(train_idx), ds.take(held_idx)


# ---------------------------------------------------------------------- file I/O

def _fmt(x) -> str:
    return format(float(x), ".17g")


def dataset_text(ds: SyntheticDataset) -> str:
    lines = [f"{ds.dim},{len(ds)},{ds.n_classes},{ds.n_cameras}"]
    for sid, cid, cam, row in zip(ds.sample_ids, ds.class_ids, ds.camera_ids, ds.features):
        lines.append(f"{sid},{cid},{cam}," + ",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def save(ds: SyntheticDataset, path) -> None:
    Path(path).write_text(dataset_text(ds))


def _ints(fields, line, what):
    try:
        return [int(f) for f in fields]
    except ValueError:
        raise ParseError(f"non-integer {what}", line) from None


def load(path) -> SyntheticDataset:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("missing header 'dim,n_samples,n_classes,n_cameras'", 1)
    head = lines[0].split(",")
    if len(head) != 4:
        raise ParseError("header must have 4 fields: dim,n_samples,n_classes,n_cameras", 1)
    dim, n_samples, n_classes, n_cameras = _ints(head, 1, "header field")
    if dim < 1 or n_samples < 0 or n_classes < 1 or n_cameras < 1:
        raise ParseError("header values out of range", 1)

    body = [(k + 2, ln) for k, ln in enumerate(lines[1:]) if ln.strip()]
    if len(body) != n_samples:
        raise ParseError(f"header declares {n_samples} samples, found {len(body)}", len(lines))
    feats = np.empty((n_samples, dim))
    meta = np.empty((n_samples, 3), dtype=np.int64)
    for row, (lineno, ln) in enumerate(body):
        fields = ln.split(",")
        if len(fields) != 3 + dim:
            raise ParseError(f"expected {3 + dim} fields, got {len(fields)}", lineno)
        meta[row] = _ints(fields[:3], lineno, "id field")
        try:
            feats[row] = [float(f) for f in fields[3:]]
        except ValueError:
            raise ParseError("non-numeric feature field", lineno) from None
        if not np.all(np.isfinite(feats[row])):
            raise ParseError("non-finite feature value", lineno)
    return SyntheticDataset(feats, meta[:, 1], meta[:, 2], meta[:, 0], n_classes, n_cameras)
