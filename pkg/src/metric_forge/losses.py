"""Hypersphere ranking loss (Lin), label-smoothed softmax, and their combination.

Every batch row serves as an anchor. For an anchor ``i`` the positive term
averages ``[d_ij - r]_+`` over its same-class partners and the negative term
is a weighted average of ``[2 - d_ij]_+`` over other-class samples, with
weights ``exp(-d) * exp(T * (2 - d))`` normalized per anchor. Lin is the mean
over anchors of the two terms, and the combined objective is
``softmax_ls + w * lin``.

Embeddings fed to Lin are expected to be unit-norm (the model normalizes
post-BN features); nothing here normalizes implicitly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import EmbeddingBatch, distance_matrix
from .errors import ConfigInvalid, DegenerateDistance, NoNegatives, NoPositives

MAX_DIST = 2.0
DEGENERATE_DIST = 1e-9
MODES = ("combined", "lin_only", "softmax_only")


@dataclass(frozen=True)
class LossConfig:
    r: float = 0.7
    T: float = 1.0
    w: float = 0.4
    epsilon_ls: float = 0.1
    max_dist: float = MAX_DIST
    # hold the negative weights constant under differentiation
    detach_weights: bool = True

    def __post_init__(self):
        if self.max_dist != MAX_DIST:
            raise ConfigInvalid(f"max_dist is fixed at {MAX_DIST}, got {self.max_dist}")
        if not 0.0 < self.r < self.max_dist:
            raise ConfigInvalid(f"r must lie in (0, {self.max_dist}), got {self.r}")
        if self.T < 0:
            raise ConfigInvalid(f"T must be non-negative, got {self.T}")
        if self.w < 0:
            raise ConfigInvalid(f"w must be non-negative, got {self.w}")
        if not 0.0 <= self.epsilon_ls < 1.0:
            raise ConfigInvalid(f"epsilon_ls must lie in [0, 1), got {self.epsilon_ls}")


@dataclass(frozen=True)
class LossBreakdown:
    lp: float
    ln: float
    lin: float
    softmax_ls: float
    m_loss: float

    def as_dict(self) -> dict:
        return {"lp": self.lp, "ln": self.ln, "lin": self.lin,
                "softmax_ls": self.softmax_ls, "m_loss": self.m_loss}


@dataclass(frozen=True)
class GradPacket:
    d_embeddings: np.ndarray
    d_logits: np.ndarray


# ---------------------------------------------------------------- scalar ops

def pairwise_loss(d_ij: float, same_class: bool, cfg: LossConfig) -> float:
    if same_class:
        return max(d_ij - cfg.r, 0.0)
    return max(cfg.max_dist - d_ij, 0.0)


def negative_weight(d_ij: float, cfg: LossConfig) -> float:
    return float(np.exp(-d_ij) * np.exp(cfg.T * (cfg.max_dist - d_ij)))


def _masks(class_ids: np.ndarray):
    same = class_ids[:, None] == class_ids[None, :]
    pos = same & ~np.eye(len(class_ids), dtype=bool)
    return pos, ~same


def positive_loss(anchor: int, batch: EmbeddingBatch, dist: np.ndarray, cfg: LossConfig) -> float:
    """Mean positive hinge for one anchor, self-pair excluded."""
    others = np.flatnonzero(batch.class_ids == batch.class_ids[anchor])
    others = others[others != anchor]
    if others.size == 0:
        raise NoPositives(f"anchor {anchor} (class {batch.class_ids[anchor]}) has no positive in the batch")
    return float(np.mean(np.maximum(dist[anchor, others] - cfg.r, 0.0)))


def _normalized_weights(d: np.ndarray, T: float) -> np.ndarray:
    # shift the exponent by its max before exponentiating; ratios are unchanged
    logw = -(1.0 + T) * d + T * MAX_DIST
    w = np.exp(logw - logw.max())
    return w / w.sum()


def negative_loss(anchor: int, batch: EmbeddingBatch, dist: np.ndarray, cfg: LossConfig) -> float:
    negs = np.flatnonzero(batch.class_ids != batch.class_ids[anchor])
    if negs.size == 0:
        raise NoNegatives(f"anchor {anchor}: every batch sample shares class {batch.class_ids[anchor]}")
    d = dist[anchor, negs]
    weights = _normalized_weights(d, cfg.T)
    return float(np.sum(weights * np.maximum(cfg.max_dist - d, 0.0)))


# -------------------------------------------------------------- batch terms

@dataclass
class _LinTerms:
    dist: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    n_pos: np.ndarray
    weights: np.ndarray  # normalized negative weights, zero off the negative mask
    hinge_n: np.ndarray
    lp: np.ndarray  # per anchor
    ln: np.ndarray


def _lin_terms(features: np.ndarray, class_ids: np.ndarray, cfg: LossConfig,
               frozen_weights: np.ndarray | None = None) -> _LinTerms:
    class_ids = np.asarray(class_ids)
    dist = distance_matrix(features)
    pos, neg = _masks(class_ids)
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        i = int(np.flatnonzero(n_pos == 0)[0])
        raise NoPositives(f"anchor {i} (class {class_ids[i]}) has no positive in the batch")
    n_neg = neg.sum(axis=1)
    if np.any(n_neg == 0):
        raise NoNegatives("batch contains a single class; Lin needs at least two")

    lp = np.where(pos, np.maximum(dist - cfg.r, 0.0), 0.0).sum(axis=1) / n_pos

    if frozen_weights is None:
        logw = np.where(neg, -(1.0 + cfg.T) * dist + cfg.T * cfg.max_dist, -np.inf)
        weights = np.exp(logw - logw.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
    else:
        weights = frozen_weights
    hinge_n = np.where(neg, np.maximum(cfg.max_dist - dist, 0.0), 0.0)
    ln = (weights * hinge_n).sum(axis=1)
    return _LinTerms(dist, pos, neg, n_pos, weights, hinge_n, lp, ln)


def lin_loss(batch: EmbeddingBatch, cfg: LossConfig) -> float:
    terms = _lin_terms(batch.features, batch.class_ids, cfg)
    return float(np.mean(terms.lp)) + float(np.mean(terms.ln))


def softmax_ls(logits: np.ndarray, class_ids, epsilon_ls: float) -> float:
    loss, _ = _softmax_ls_and_grad(logits, class_ids, epsilon_ls)
    return loss


def _smoothed_targets(class_ids, n_rows: int, n_classes: int, eps: float) -> np.ndarray:
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if n_classes < 2:
        raise ValueError("softmax needs at least 2 classes")
    if class_ids.shape != (n_rows,) or np.any(class_ids < 0) or np.any(class_ids >= n_classes):
        raise ValueError(f"class ids must be {n_rows} integers in [0, {n_classes})")
    q = np.full((n_rows, n_classes), eps / n_classes)
    q[np.arange(n_rows), class_ids] += 1.0 - eps
    return q


def _softmax_ls_and_grad(logits, class_ids, eps):
    logits = np.asarray(logits, dtype=np.float64)
    b, c = logits.shape
    q = _smoothed_targets(class_ids, b, c, eps)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-np.mean(np.sum(q * log_p, axis=1)))
    return loss, (np.exp(log_p) - q) / b


def _lin_grad(terms: _LinTerms, features: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Gradient of Lin with respect to the embedding rows."""
    b = len(features)
    d = terms.dist
    # coeff[i, j] = dLin / d(d_ij) for the anchor-i term
    coeff = np.where(terms.pos & (d > cfg.r), 1.0 / terms.n_pos[:, None], 0.0)
    active_n = terms.neg & (d < cfg.max_dist)
    coeff -= np.where(active_n, terms.weights, 0.0)
    if not cfg.detach_weights:
        slope = -(1.0 + cfg.T)
        coeff += np.where(terms.neg, slope * terms.weights * (terms.hinge_n - terms.ln[:, None]), 0.0)
    coeff /= b
    sym = coeff + coeff.T
    np.fill_diagonal(sym, 0.0)

    collapsed = (d < DEGENERATE_DIST) & (sym != 0.0)
    np.fill_diagonal(collapsed, False)
    if np.any(collapsed):
        i, j = np.argwhere(collapsed)[0]
        raise DegenerateDistance(f"samples {i} and {j} are {d[i, j]:.3g} apart with an active loss term")

    scale = np.divide(sym, d, out=np.zeros_like(sym), where=sym != 0.0)
    return scale.sum(axis=1, keepdims=True) * features - scale @ features


def loss_and_grad(features, class_ids, logits, cfg: LossConfig, mode: str = "combined"):
    """Loss breakdown plus gradients of the objective selected by ``mode``.

    The breakdown always reports the full combined loss. The gradient is that
    of ``softmax_ls + w * lin`` for ``combined``, ``w * lin`` for ``lin_only``
    and ``softmax_ls`` for ``softmax_only``.
    """
    if mode not in MODES:
        raise ConfigInvalid(f"mode must be one of {MODES}, got {mode!r}")
    features = np.asarray(features, dtype=np.float64)
    terms = _lin_terms(features, class_ids, cfg)
    sm, d_logits = _softmax_ls_and_grad(logits, class_ids, cfg.epsilon_ls)
    lp, ln = float(np.mean(terms.lp)), float(np.mean(terms.ln))
    lin = lp + ln
    breakdown = LossBreakdown(lp=lp, ln=ln, lin=lin, softmax_ls=sm, m_loss=sm + cfg.w * lin)

    if mode == "softmax_only":
        d_emb = np.zeros_like(features)
    else:
        d_emb = cfg.w * _lin_grad(terms, features, cfg)
    if mode == "lin_only":
        d_logits = np.zeros_like(d_logits)
    return breakdown, GradPacket(d_embeddings=d_emb, d_logits=d_logits)


def m_loss(batch: EmbeddingBatch, logits, cfg: LossConfig) -> LossBreakdown:
    terms = _lin_terms(batch.features, batch.class_ids, cfg)
    sm = softmax_ls(logits, batch.class_ids, cfg.epsilon_ls)
    lp, ln = float(np.mean(terms.lp)), float(np.mean(terms.ln))
    return LossBreakdown(lp=lp, ln=ln, lin=lp + ln, softmax_ls=sm, m_loss=sm + cfg.w * (lp + ln))


def m_loss_grad(batch: EmbeddingBatch, logits, cfg: LossConfig) -> GradPacket:
    return loss_and_grad(batch.features, batch.class_ids, logits, cfg)[1]
