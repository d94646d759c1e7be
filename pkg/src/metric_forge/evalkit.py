"""Re-identification evaluation: CMC, mAP and k-reciprocal re-ranking.

Protocol conventions:

* gallery entries sharing both class and camera with the query are junk and
  dropped for that query (no filtering when the camera id is -1);
* queries left without any positive in the gallery are skipped and excluded
  from every average;
* ranking ties are broken by ascending gallery index.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import EmbeddingBatch, cross_distances, distance_matrix
from .errors import ConfigInvalid, EmptyGallery, ParseError
from .model import forward

DIST_MAGIC = 0x4D464431  # "MFD1"
DIST_VERSION = 1


@dataclass(frozen=True)
class EvalSplit:
    """Query and gallery sets.

    ``same_set`` marks an all-vs-all split (query and gallery are the same
    rows); each query's own gallery entry is then treated as junk.
    """

    query: EmbeddingBatch
    gallery: EmbeddingBatch
    same_set: bool = False

    def __post_init__(self):
        if self.same_set and len(self.query) != len(self.gallery):
            raise ValueError("an all-vs-all split needs identical query and gallery rows")


@dataclass(frozen=True)
class RerankConfig:
    k1: int = 20
    k2: int = 6
    lam: float = 0.3

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise ConfigInvalid("k1 and k2 must be >= 1")
        if self.k2 > self.k1:
            raise ConfigInvalid(f"k2 ({self.k2}) must not exceed k1 ({self.k1})")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigInvalid(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    n_queries_used: int
    n_queries_skipped: int
    reranked: "EvalReport | None" = None

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def as_dict(self, ranks=(1, 5, 10)) -> dict:
        out = {"map": self.map, "n_queries_used": self.n_queries_used,
               "n_queries_skipped": self.n_queries_skipped}
        for k in ranks:
            if k <= len(self.cmc):
                out[f"rank{k}"] = float(self.cmc[k - 1])
        if self.reranked is not None:
            out["reranked"] = self.reranked.as_dict(ranks)
        return out


def query_gallery_split(batch: EmbeddingBatch, n_query_per_class: int = 0) -> EvalSplit:
    """First ``n_query_per_class`` rows of every class become queries, the rest gallery.

    ``n_query_per_class=0`` gives the all-vs-all split over ``batch``.
    """
    if n_query_per_class == 0:
        return EvalSplit(batch, batch, same_set=True)
    q_idx, g_idx = [], []
    for c in np.unique(batch.class_ids):
        members = np.flatnonzero(batch.class_ids == c)
        q_idx.extend(members[:n_query_per_class])
        g_idx.extend(members[n_query_per_class:])
    if not g_idx:
        raise EmptyGallery(f"{n_query_per_class} queries per class leave no gallery rows")
    return EvalSplit(batch.take(np.sort(q_idx)), batch.take(np.sort(g_idx)))


def _ranked_hits(split: EvalSplit, dist: np.ndarray):
    """Per used query, the boolean hit sequence along its junk-filtered ranking."""
    dist = np.asarray(dist, dtype=np.float64)
    n_q, n_g = len(split.query), len(split.gallery)
    if n_g == 0:
        raise EmptyGallery("gallery is empty")
    if dist.shape != (n_q, n_g):
        raise ValueError(f"distance matrix must be {n_q} x {n_g}, got {dist.shape}")
    if not np.all(np.isfinite(dist)):
        raise ValueError("distance matrix contains non-finite entries")
    q, g = split.query, split.gallery
    order = np.argsort(dist, axis=1, kind="stable")
    hits = []
    for i in range(n_q):
        ranked = order[i]
        same = g.class_ids[ranked] == q.class_ids[i]
        junk = same & (g.camera_ids[ranked] == q.camera_ids[i]) & (q.camera_ids[i] != -1)
        if split.same_set:
            junk = junk | (ranked == i)
        seq = same[~junk]
        if seq.any():
            hits.append(seq)
    return hits, n_q - len(hits), n_g


def _no_queries():
    return ValueError("no query has a valid positive in the gallery")


def cmc_curve(split: EvalSplit, dist) -> np.ndarray:
    hits, _, n_g = _ranked_hits(split, dist)
    if not hits:
        raise _no_queries()
    counts = np.zeros(n_g)
    for seq in hits:
        counts[int(np.argmax(seq)):] += 1
    return counts / len(hits)


def _average_precision(seq: np.ndarray) -> float:
    positions = np.flatnonzero(seq) + 1.0
    precisions = np.arange(1, len(positions) + 1) / positions
    return float(np.cumsum(precisions)[-1] / len(positions))


def mean_average_precision(split: EvalSplit, dist) -> float:
    hits, _, _ = _ranked_hits(split, dist)
    if not hits:
        raise _no_queries()
    return float(np.cumsum([_average_precision(s) for s in hits])[-1] / len(hits))


def evaluate_distances(split: EvalSplit, dist) -> EvalReport:
    hits, skipped, n_g = _ranked_hits(split, dist)
    if not hits:
        raise _no_queries()
    counts = np.zeros(n_g)
    for seq in hits:
        counts[int(np.argmax(seq)):] += 1
    aps = np.cumsum([_average_precision(s) for s in hits])[-1]
    return EvalReport(counts / len(hits), float(aps / len(hits)), len(hits), skipped)


# ------------------------------------------------------------- re-ranking

def _reciprocal(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward_idx = initial_rank[i, :k + 1]
    backward_idx = initial_rank[forward_idx, :k + 1]
    return forward_idx[np.any(backward_idx == i, axis=1)]


def k_reciprocal_rerank(joint_dist, num_query: int, cfg: RerankConfig = RerankConfig()) -> np.ndarray:
    """Re-ranked query x gallery distances from a joint (query + gallery) matrix.

    ``joint_dist`` is the symmetric Euclidean distance matrix over the
    queries followed by the gallery. Following the reference re-ranking
    recipe, distances are squared and divided by their per-row maximum
    before building k-reciprocal sets (with the half-k1 expansion),
    Gaussian-kernel encodings, k2 query expansion and the Jaccard distance.
    The result is ``(1 - lam) * jaccard + lam * normalized_original``.
    """
    d = np.asarray(joint_dist, dtype=np.float64)
    n = d.shape[0]
    if d.ndim != 2 or d.shape[1] != n:
        raise ValueError(f"joint distance matrix must be square, got {d.shape}")
    if not 0 < num_query < n:
        raise ValueError(f"num_query must lie in (0, {n}), got {num_query}")
    if cfg.k1 >= n:
        raise ConfigInvalid(f"k1 ({cfg.k1}) must be smaller than the number of samples ({n})")

    sq = d ** 2
    original = (sq / np.max(sq, axis=0)).T
    initial_rank = np.argsort(original, axis=1, kind="stable")
    half = int(round(cfg.k1 / 2))

    V = np.zeros_like(original)
    for i in range(n):
        recip = _reciprocal(initial_rank, i, cfg.k1)
        expansion = recip
        for cand in recip:
            cand_recip = _reciprocal(initial_rank, cand, half)
            if len(np.intersect1d(cand_recip, recip)) > 2.0 / 3.0 * len(cand_recip):
                expansion = np.append(expansion, cand_recip)
        expansion = np.unique(expansion)
        weight = np.exp(-original[i, expansion])
        V[i, expansion] = weight / np.sum(weight)

    if cfg.k2 != 1:
        V = np.stack([V[initial_rank[i, :cfg.k2]].mean(axis=0) for i in range(n)])

    jaccard = np.empty((num_query, n))
    for i in range(num_query):
        overlap = np.minimum(V[i][None, :], V).sum(axis=1)
        jaccard[i] = 1.0 - overlap / (2.0 - overlap)

    final = jaccard * (1.0 - cfg.lam) + original[:num_query] * cfg.lam
    return final[:, num_query:]


def joint_distances(split: EvalSplit) -> np.ndarray:
    return distance_matrix(np.vstack([split.query.features, split.gallery.features]))


def rerank_split(split: EvalSplit, cfg: RerankConfig = RerankConfig()) -> np.ndarray:
    return k_reciprocal_rerank(joint_distances(split), len(split.query), cfg)


# ------------------------------------------------------------- model evaluation

def embed(params, inputs, tap: str = "post_bn") -> np.ndarray:
    """Unit-norm inference-mode features."""
    return forward(params, inputs, "infer").embedding(tap)


def embed_split(split: EvalSplit, params, tap: str = "post_bn") -> EvalSplit:
    return EvalSplit(split.query.with_features(embed(params, split.query.features, tap)),
                     split.gallery.with_features(embed(params, split.gallery.features, tap)),
                     split.same_set)


def evaluate(split: EvalSplit, params, rerank: RerankConfig | None = None, tap: str = "post_bn") -> EvalReport:
    """Embed raw query/gallery inputs with ``params`` and score the retrieval."""
    emb = embed_split(split, params, tap)
    report = evaluate_distances(emb, cross_distances(emb.query.features, emb.gallery.features))
    if rerank is not None:
        report.reranked = evaluate_distances(emb, rerank_split(emb, rerank))
    return report


# ------------------------------------------------------------- distance dumps

def write_distance_matrix(path, matrix) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise ValueError("distance dump needs a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4i", DIST_MAGIC, DIST_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_distance_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ParseError("distance file shorter than its header")
    magic, version, rows, cols = struct.unpack("<4i", raw[:16])
    if magic != DIST_MAGIC:
        raise ParseError("bad magic number in distance file")
    if version != DIST_VERSION:
        raise ParseError(f"unsupported distance file version {version}")
    if rows < 0 or cols < 0 or len(raw) != 16 + 8 * rows * cols:
        raise ParseError(f"payload size does not match {rows} x {cols}")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(rows, cols).astype(np.float64)
