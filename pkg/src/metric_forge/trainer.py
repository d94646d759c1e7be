"""SGD training loop with linear warmup and step decay."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, NonFiniteLoss
from .losses import MODES, LossConfig, loss_and_grad
from .model import FEATURE_TAPS, backward, forward, init_params, save_checkpoint, updated_running_stats
from .sampler import PKSampler

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    warmup_epochs: int = 10
    total_epochs: int = 120
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    P: int = 16
    K: int = 4
    mode: str = "combined"
    feature_tap: str = "post_bn"
    hidden_sizes: tuple = (64,)
    embed_dim: int = 32
    normalized_classifier: bool = False

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigInvalid(f"base_lr must be positive, got {self.base_lr}")
        if self.total_epochs < 0 or self.warmup_epochs < 0:
            raise ConfigInvalid("epoch counts must be non-negative")
        if self.warmup_epochs > self.total_epochs:
            raise ConfigInvalid(f"warmup_epochs ({self.warmup_epochs}) exceeds total_epochs ({self.total_epochs})")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigInvalid(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigInvalid("weight_decay must be non-negative")
        if self.mode not in MODES:
            raise ConfigInvalid(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.feature_tap not in FEATURE_TAPS:
            raise ConfigInvalid(f"feature_tap must be one of {FEATURE_TAPS}, got {self.feature_tap!r}")


def warmup_lr(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr``, then x0.1 at 60% and again at 85% of training."""
    if not 0 <= epoch < max(cfg.total_epochs, 1):
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    lr = cfg.base_lr
    for milestone in (cfg.total_epochs * 60 // 100, cfg.total_epochs * 85 // 100):
        if epoch >= milestone:
            lr *= 0.1
    return lr


def train_step(params, batch_inputs, batch_labels, cfg: TrainConfig, optimizer_state: dict, lr: float | None = None):
    """One SGD-with-momentum update, in place on ``params``.

    Returns ``(params, breakdown)``; the breakdown is measured before the
    update. ``optimizer_state`` holds the velocity buffers and is updated in
    place. Weight decay skips the BN scale.
    """
    lr = cfg.base_lr if lr is None else lr
    trace = forward(params, batch_inputs, "train", cfg.normalized_classifier)
    breakdown, grad = loss_and_grad(trace.embedding(cfg.feature_tap), batch_labels, trace.logits,
                                    cfg.loss, cfg.mode)
    if not all(np.isfinite(v) for v in breakdown.as_dict().values()):
        raise NonFiniteLoss(f"loss diverged: {breakdown}")
    grads = backward(params, trace, grad, cfg.feature_tap)

    tensors = params.tensors()
    for name, g in grads.items():
        theta = tensors[name]
        if cfg.weight_decay and name != "bn.scale":
            g = g + cfg.weight_decay * theta
        v = optimizer_state.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        optimizer_state[name] = v
        theta -= lr * v
    params.bn_running_mean, params.bn_running_var = updated_running_stats(params, trace)
    return params, breakdown


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "TrainLog":
        return cls([json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()])


def class_index(labels) -> tuple:
    """Map arbitrary class ids onto 0..C-1; returns (classes, contiguous labels)."""
    classes, contiguous = np.unique(np.asarray(labels), return_inverse=True)
    return classes, contiguous


def fit(dataset, cfg: TrainConfig, out_dir=None):
    """Train a fresh model on ``dataset``; returns ``(params, TrainLog)``.

    With ``out_dir`` set, writes ``checkpoint.txt`` and ``train_log.jsonl``.
    """
    classes, labels = class_index(dataset.class_ids)
    layer_sizes = (dataset.features.shape[1], *cfg.hidden_sizes, cfg.embed_dim)
    seeds = np.random.SeedSequence(int(cfg.seed) & 0xFFFFFFFFFFFFFFFF).generate_state(2, dtype=np.uint64)
    params = init_params(layer_sizes, len(classes), int(seeds[0]))
    train_log = TrainLog()

    if cfg.total_epochs > 0:
        sampler = PKSampler(labels, cfg.P, cfg.K, int(seeds[1]))
        opt_state = {}
        for epoch in range(cfg.total_epochs):
            lr = warmup_lr(epoch, cfg)
            rows = []
            for plan in sampler.epoch():
                idx = plan.sample_indices
                _, bd = train_step(params, dataset.features[idx], labels[idx], cfg, opt_state, lr)
                rows.append((bd.m_loss, bd.lp, bd.ln, bd.softmax_ls))
            means = np.mean(rows, axis=0)
            rec = {"epoch": epoch, "lr": lr, "m_loss": float(means[0]), "lp": float(means[1]),
                   "ln": float(means[2]), "softmax_ls": float(means[3])}
            train_log.records.append(rec)
            log.debug("epoch %d lr %.5g m_loss %.5f", epoch, lr, rec["m_loss"])

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.txt", params)
        train_log.write(out / "train_log.jsonl")
    return params, train_log
