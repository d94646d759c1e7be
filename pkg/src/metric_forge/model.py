"""Toy BN-neck network: MLP encoder -> scale-only batch norm -> bias-free classifier.

The encoder stands in for a CNN backbone. Its output (``pre_bn``) goes through
a batch-norm layer that has a scale ``gamma`` but no shift, then a linear
classifier without bias produces logits. The metric loss consumes the
L2-normalized post-BN feature (or the normalized pre-BN feature when the
``pre_bn`` tap is selected).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import normalize_rows
from .errors import BatchTooSmall, ParseError
from .losses import GradPacket

EPS_BN = 1e-5
BN_MOMENTUM = 0.1
FEATURE_TAPS = ("post_bn", "pre_bn")
CHECKPOINT_MAGIC = "metric-forge-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    layer_sizes: tuple
    encoder_weights: list  # [(W (out, in), b (out,)), ...]
    bn_scale: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    fc_weights: np.ndarray  # (C, D)
    eps_bn: float = EPS_BN
    momentum: float = BN_MOMENTUM

    @property
    def dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_classes(self) -> int:
        return self.fc_weights.shape[0]

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k, (w, b) in enumerate(self.encoder_weights):
            out[f"encoder.{k}.weight"] = w
            out[f"encoder.{k}.bias"] = b
        out["bn.scale"] = self.bn_scale
        out["bn.running_mean"] = self.bn_running_mean
        out["bn.running_var"] = self.bn_running_var
        out["fc.weight"] = self.fc_weights
        return out

    @classmethod
    def from_tensors(cls, layer_sizes, tensors, eps_bn=EPS_BN, momentum=BN_MOMENTUM) -> "ModelParams":
        n_layers = len(layer_sizes) - 1
        enc = [(np.array(tensors[f"encoder.{k}.weight"], dtype=np.float64),
                np.array(tensors[f"encoder.{k}.bias"], dtype=np.float64)) for k in range(n_layers)]
        return cls(tuple(int(s) for s in layer_sizes), enc,
                   np.array(tensors["bn.scale"], dtype=np.float64),
                   np.array(tensors["bn.running_mean"], dtype=np.float64),
                   np.array(tensors["bn.running_var"], dtype=np.float64),
                   np.array(tensors["fc.weight"], dtype=np.float64),
                   eps_bn=float(eps_bn), momentum=float(momentum))

    def copy(self) -> "ModelParams":
        return ModelParams.from_tensors(self.layer_sizes, self.tensors(), self.eps_bn, self.momentum)


# trainable tensors; running statistics are updated by forward, not by gradients
def trainable_names(params: ModelParams) -> list:
    return [n for n in params.tensors() if not n.startswith("bn.running")]


def _glorot(rng, fan_out, fan_in):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_params(layer_sizes, n_classes: int, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero encoder biases, gamma = 1, running stats (0, 1)."""
    layer_sizes = tuple(int(s) for s in layer_sizes)
    if len(layer_sizes) < 2 or min(layer_sizes) < 1:
        raise ValueError(f"layer_sizes needs an input and output size >= 1, got {layer_sizes}")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    enc = [(_glorot(rng, fo, fi), np.zeros(fo)) for fi, fo in zip(layer_sizes[:-1], layer_sizes[1:])]
    d = layer_sizes[-1]
    return ModelParams(layer_sizes, enc, np.ones(d), np.zeros(d), np.ones(d), _glorot(rng, n_classes, d))


@dataclass
class ForwardTrace:
    mode: str
    pre_bn: np.ndarray
    post_bn: np.ndarray
    post_bn_normalized: np.ndarray
    logits: np.ndarray
    normalized_classifier: bool = False
    # backward caches
    activations: list = field(default_factory=list)  # input of each encoder layer
    pre_activations: list = field(default_factory=list)
    x_hat: np.ndarray = None
    inv_std: np.ndarray = None
    batch_mean: np.ndarray = None
    batch_var: np.ndarray = None
    _pre_bn_normalized: np.ndarray = field(default=None, repr=False)

    @property
    def pre_bn_normalized(self) -> np.ndarray:
        # lazy: an all-zero encoder row is only an error when this tap is used
        if self._pre_bn_normalized is None:
            self._pre_bn_normalized = normalize_rows(self.pre_bn)
        return self._pre_bn_normalized

    def embedding(self, tap: str = "post_bn") -> np.ndarray:
        if tap == "post_bn":
            return self.post_bn_normalized
        if tap == "pre_bn":
            return self.pre_bn_normalized
        raise ValueError(f"feature tap must be one of {FEATURE_TAPS}, got {tap!r}")


def forward(params: ModelParams, inputs, mode: str = "train", normalized_classifier: bool = False) -> ForwardTrace:
    """Run the network.

    ``mode="train"`` normalizes with batch statistics (biased variance);
    ``mode="infer"`` with the running statistics. The running statistics
    are never mutated here; see :func:`updated_running_stats`.
    ``normalized_classifier`` feeds the unit-norm post-BN feature to the
    classifier instead of the raw one.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"inputs must be B x {params.layer_sizes[0]}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain non-finite entries")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and x.shape[0] < 2:
        raise BatchTooSmall(f"train mode needs at least 2 samples, got {x.shape[0]}")

    activations, pre_acts = [], []
    h = x
    last = len(params.encoder_weights) - 1
    for k, (w, b) in enumerate(params.encoder_weights):
        activations.append(h)
        a = h @ w.T + b
        pre_acts.append(a)
        h = np.maximum(a, 0.0) if k < last else a
    pre_bn = h

    if mode == "train":
        mean = pre_bn.mean(axis=0)
        var = pre_bn.var(axis=0)
    else:
        mean, var = params.bn_running_mean, params.bn_running_var
    inv_std = 1.0 / np.sqrt(var + params.eps_bn)
    x_hat = (pre_bn - mean) * inv_std
    post_bn = params.bn_scale * x_hat
    post_norm = normalize_rows(post_bn)
    logits = (post_norm if normalized_classifier else post_bn) @ params.fc_weights.T
    return ForwardTrace(mode, pre_bn, post_bn, post_norm, logits, normalized_classifier,
                        activations, pre_acts, x_hat, inv_std,
                        mean if mode == "train" else None, var if mode == "train" else None)


def updated_running_stats(params: ModelParams, trace: ForwardTrace):
    """Running (mean, var) after absorbing a train-mode batch.

    The running variance tracks the unbiased batch variance.
    """
    if trace.mode != "train":
        raise ValueError("running statistics only update from train-mode traces")
    b = trace.pre_bn.shape[0]
    m = params.momentum
    unbiased = trace.batch_var * b / (b - 1)
    return ((1 - m) * params.bn_running_mean + m * trace.batch_mean,
            (1 - m) * params.bn_running_var + m * unbiased)


def _normalize_backward(raw: np.ndarray, unit: np.ndarray, grad: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return (grad - unit * np.sum(unit * grad, axis=1, keepdims=True)) / norms


def backward(params: ModelParams, trace: ForwardTrace, grad: GradPacket, tap: str = "post_bn") -> dict:
    """Gradients for every trainable tensor, keyed like ``params.tensors()``.

    ``grad.d_embeddings`` is taken with respect to ``trace.embedding(tap)``.
    """
    if trace.mode != "train":
        raise ValueError("backward needs a train-mode trace")
    if tap not in FEATURE_TAPS:
        raise ValueError(f"feature tap must be one of {FEATURE_TAPS}, got {tap!r}")
    d_emb = np.asarray(grad.d_embeddings, dtype=np.float64)
    d_logits = np.asarray(grad.d_logits, dtype=np.float64)
    if d_emb.shape != trace.post_bn.shape or d_logits.shape != trace.logits.shape:
        raise ValueError(f"gradient shapes {d_emb.shape}, {d_logits.shape} do not match the trace")

    grads = {}
    fc_in = trace.post_bn_normalized if trace.normalized_classifier else trace.post_bn
    grads["fc.weight"] = d_logits.T @ fc_in
    d_fc_in = d_logits @ params.fc_weights
    if trace.normalized_classifier:
        d_post = _normalize_backward(trace.post_bn, trace.post_bn_normalized, d_fc_in)
    else:
        d_post = d_fc_in
    if tap == "post_bn":
        d_post = d_post + _normalize_backward(trace.post_bn, trace.post_bn_normalized, d_emb)

    x_hat = trace.x_hat
    grads["bn.scale"] = np.sum(d_post * x_hat, axis=0)
    d_xhat = d_post * params.bn_scale
    b = x_hat.shape[0]
    d_h = trace.inv_std / b * (b * d_xhat - d_xhat.sum(axis=0) - x_hat * np.sum(d_xhat * x_hat, axis=0))
    if tap == "pre_bn":
        d_h = d_h + _normalize_backward(trace.pre_bn, trace.pre_bn_normalized, d_emb)

    last = len(params.encoder_weights) - 1
    for k in range(last, -1, -1):
        w, _ = params.encoder_weights[k]
        d_a = d_h if k == last else d_h * (trace.pre_activations[k] > 0)
        grads[f"encoder.{k}.weight"] = d_a.T @ trace.activations[k]
        grads[f"encoder.{k}.bias"] = d_a.sum(axis=0)
        d_h = d_a @ w
    return {n: grads[n] for n in trainable_names(params)}


def relu_pattern(trace: ForwardTrace) -> tuple:
    """Sign pattern of the hidden pre-activations (for kink detection in gradient checks)."""
    return tuple((a > 0).tobytes() for a in trace.pre_activations[:-1])


# ------------------------------------------------------------------ checkpoint

def _fmt(x) -> str:
    return format(float(x), ".17g")


def checkpoint_text(params: ModelParams) -> str:
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             "layer_sizes " + " ".join(str(s) for s in params.layer_sizes),
             f"D {params.dim}",
             f"C {params.n_classes}",
             f"eps_bn {_fmt(params.eps_bn)}",
             f"momentum {_fmt(params.momentum)}"]
    for name, t in params.tensors().items():
        lines.append(f"tensor {name} " + " ".join(str(s) for s in t.shape))
        rows = t if t.ndim == 2 else t[None, :]
        lines.extend(" ".join(_fmt(v) for v in row) for row in rows)
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_checkpoint(path, params: ModelParams) -> None:
    Path(path).write_text(checkpoint_text(params))


def _header_field(lines, idx, key):
    if idx >= len(lines):
        raise ParseError(f"missing header field {key!r}", idx + 1)
    parts = lines[idx].split()
    if not parts or parts[0] != key:
        raise ParseError(f"expected header field {key!r}", idx + 1)
    return parts[1:]


def load_checkpoint(path) -> ModelParams:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split()[:1] != [CHECKPOINT_MAGIC]:
        raise ParseError("not a metric-forge checkpoint", 1)
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise ParseError("bad checkpoint version", 1) from None
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 1)
    try:
        layer_sizes = [int(v) for v in _header_field(lines, 1, "layer_sizes")]
        dim = int(_header_field(lines, 2, "D")[0])
        n_classes = int(_header_field(lines, 3, "C")[0])
        eps_bn = float(_header_field(lines, 4, "eps_bn")[0])
        momentum = float(_header_field(lines, 5, "momentum")[0])
    except (ValueError, IndexError) as exc:
        raise ParseError(f"malformed header: {exc}") from None

    tensors = {}
    i = 6
    while i < len(lines) and lines[i] != "end":
        parts = lines[i].split()
        if len(parts) < 3 or parts[0] != "tensor":
            raise ParseError("expected 'tensor <name> <shape...>'", i + 1)
        name = parts[1]
        try:
            shape = tuple(int(s) for s in parts[2:])
        except ValueError:
            raise ParseError(f"bad shape for {name}", i + 1) from None
        n_rows = shape[0] if len(shape) == 2 else 1
        rows = []
        for r in range(n_rows):
            ln = i + 1 + r
            if ln >= len(lines):
                raise ParseError(f"truncated tensor {name}", ln + 1)
            try:
                rows.append([float(v) for v in lines[ln].split()])
            except ValueError:
                raise ParseError(f"non-numeric value in tensor {name}", ln + 1) from None
        try:
            tensors[name] = np.array(rows, dtype=np.float64).reshape(shape)
        except ValueError:
            raise ParseError(f"tensor {name} does not match shape {shape}", i + 1) from None
        i += 1 + n_rows
    if i >= len(lines):
        raise ParseError("missing 'end' marker", len(lines))
    try:
        params = ModelParams.from_tensors(layer_sizes, tensors, eps_bn, momentum)
    except KeyError as exc:
        raise ParseError(f"missing tensor {exc}") from None
    if params.dim != dim or params.n_classes != n_classes:
        raise ParseError("header D/C disagree with tensor shapes")
    return params
