"""Central finite-difference checks of the analytic loss and model gradients.

When ``detach_weights`` is on, the analytic gradient treats the normalized
negative weights as constants, so the finite-difference objective freezes
them at their unperturbed values. Coordinates whose ±h perturbation flips a
hinge or ReLU activation pattern are skipped: the function is not
differentiable across those boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .embedding import distance_matrix, normalize_rows
from .errors import NormalizeZeroVector
from .model import backward, forward, init_params, relu_pattern, trainable_names

STEP = 1e-5
TOLERANCE = 1e-4
# denominators below this are treated as this (avoids dividing roundoff by ~0)
REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _objective(features, class_ids, logits, cfg, frozen):
    terms = L._lin_terms(features, class_ids, cfg, frozen_weights=frozen)
    sm, _ = L._softmax_ls_and_grad(logits, class_ids, cfg.epsilon_ls)
    return sm + cfg.w * (np.mean(terms.lp) + np.mean(terms.ln))


def _hinge_pattern(features, class_ids, cfg):
    d = distance_matrix(features)
    pos, neg = L._masks(np.asarray(class_ids))
    return (pos & (d > cfg.r)).tobytes() + (neg & (d < cfg.max_dist)).tobytes()


def _frozen(features, class_ids, cfg):
    return L._lin_terms(features, class_ids, cfg).weights if cfg.detach_weights else None


@dataclass
class CheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int

    def merge(self, other: "CheckResult") -> "CheckResult":
        return CheckResult(max(self.max_rel_error, other.max_rel_error),
                           self.n_checked + other.n_checked, self.n_skipped + other.n_skipped)


def check_loss_grads(features, class_ids, logits, cfg: L.LossConfig, h: float = STEP) -> CheckResult:
    """Compare ``m_loss_grad`` with central differences on embeddings and logits."""
    features = np.array(features, dtype=np.float64)
    logits = np.array(logits, dtype=np.float64)
    _, grad = L.loss_and_grad(features, class_ids, logits, cfg)
    frozen = _frozen(features, class_ids, cfg)
    base_pattern = _hinge_pattern(features, class_ids, cfg)

    errs, skipped = [], 0
    for idx in np.ndindex(features.shape):
        orig = features[idx]
        features[idx] = orig + h
        up, pat_up = _objective(features, class_ids, logits, cfg, frozen), _hinge_pattern(features, class_ids, cfg)
        features[idx] = orig - h
        dn, pat_dn = _objective(features, class_ids, logits, cfg, frozen), _hinge_pattern(features, class_ids, cfg)
        features[idx] = orig
        if pat_up != base_pattern or pat_dn != base_pattern:
            skipped += 1
            continue
        errs.append(relative_error(grad.d_embeddings[idx], (up - dn) / (2 * h)))
    # logits enter only through the smooth softmax term
    for idx in np.ndindex(logits.shape):
        orig = logits[idx]
        logits[idx] = orig + h
        up = _objective(features, class_ids, logits, cfg, frozen)
        logits[idx] = orig - h
        dn = _objective(features, class_ids, logits, cfg, frozen)
        logits[idx] = orig
        errs.append(relative_error(grad.d_logits[idx], (up - dn) / (2 * h)))
    return CheckResult(float(np.max(errs)) if errs else 0.0, len(errs), skipped)


def check_model_grads(params, inputs, class_ids, cfg: L.LossConfig, tap: str = "post_bn",
                      normalized_classifier: bool = False, h: float = STEP) -> CheckResult:
    """Compare model ``backward`` with central differences on every trainable tensor."""
    params = params.copy()
    inputs = np.asarray(inputs, dtype=np.float64)

    def run():
        tr = forward(params, inputs, "train", normalized_classifier)
        return tr, tr.embedding(tap)

    trace, emb = run()
    _, gpack = L.loss_and_grad(emb, class_ids, trace.logits, cfg)
    grads = backward(params, trace, gpack, tap)
    frozen = _frozen(emb, class_ids, cfg)
    base_pattern = (relu_pattern(trace), _hinge_pattern(emb, class_ids, cfg))

    def evaluate():
        tr, e = run()
        return _objective(e, class_ids, tr.logits, cfg, frozen), (relu_pattern(tr), _hinge_pattern(e, class_ids, cfg))

    tensors = params.tensors()
    errs, skipped = [], 0
    for name in trainable_names(params):
        t = tensors[name]
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + h
            up, pat_up = evaluate()
            t[idx] = orig - h
            dn, pat_dn = evaluate()
            t[idx] = orig
            if pat_up != base_pattern or pat_dn != base_pattern:
                skipped += 1
                continue
            errs.append(relative_error(grads[name][idx], (up - dn) / (2 * h)))
    return CheckResult(float(np.max(errs)) if errs else 0.0, len(errs), skipped)


def balanced_labels(rng, batch_size: int, n_classes: int) -> np.ndarray:
    """Labels with every class present at least twice (Lin's precondition)."""
    reps = batch_size // n_classes
    labels = np.repeat(np.arange(n_classes), reps)
    labels = np.concatenate([labels, rng.integers(0, n_classes, batch_size - len(labels))])
    return rng.permutation(labels)


@dataclass
class TrialConfig:
    seed: int
    B: int
    D: int
    C: int
    r: float
    T: float
    w: float
    detach_weights: bool
    tap: str
    normalized_classifier: bool


def sample_trial(rng, seed: int) -> TrialConfig:
    return TrialConfig(
        seed=seed,
        B=int(rng.choice([8, 16])),
        D=int(rng.choice([4, 8, 32])),
        C=int(rng.choice([2, 3, 4])),
        r=float(rng.choice([0.6, 0.7, 0.8])),
        T=float(rng.choice([0.5, 1.0, 5.0])),
        w=float(rng.choice([0.2, 0.4, 0.6])),
        detach_weights=bool(rng.random() < 0.75),
        tap="pre_bn" if rng.random() < 0.25 else "post_bn",
        normalized_classifier=bool(rng.random() < 0.2),
    )


def run_trial(trial: TrialConfig, hidden: int = 8, input_dim: int = 5) -> CheckResult:
    rng = np.random.default_rng(trial.seed)
    cfg = L.LossConfig(r=trial.r, T=trial.T, w=trial.w, detach_weights=trial.detach_weights)
    labels = balanced_labels(rng, trial.B, trial.C)
    feats = normalize_rows(rng.normal(size=(trial.B, trial.D)))
    logits = rng.normal(size=(trial.B, trial.C))
    res = check_loss_grads(feats, labels, logits, cfg)

    params = init_params((input_dim, hidden, trial.D), trial.C, seed=trial.seed)
    # move gamma and the biases off their init values so their gradients are exercised
    params.bn_scale = rng.uniform(0.5, 1.5, size=trial.D)
    for _, b in params.encoder_weights:
        b += rng.normal(scale=0.1, size=b.shape)
    for _ in range(20):
        inputs = rng.normal(size=(trial.B, input_dim))
        try:
            forward(params, inputs, "train").embedding(trial.tap)
            break
        except NormalizeZeroVector:
            continue  # every ReLU dead for some row; redraw
    return res.merge(check_model_grads(params, inputs, labels, cfg, trial.tap, trial.normalized_classifier))


def run_trials(seed: int, trials: int):
    """Run ``trials`` seeded random configurations; returns [(TrialConfig, CheckResult)]."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(trials):
        trial = sample_trial(rng, int(rng.integers(0, 2**63 - 1)))
        out.append((trial, run_trial(trial)))
    return out
