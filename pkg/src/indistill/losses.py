"""Distillation and task losses.

All losses run on the autodiff tensors and return a :class:`LossValue`
whose `.tensor` field stays differentiable; `.value` is the detached float.
Teacher-side inputs are typically detached, so no gradient work is spent on
them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, DimensionError, ParameterError
from .tensor import Tensor, log_softmax, no_grad, pick_classes

__all__ = [
    "LossValue",
    "mse_feature_loss",
    "kl_distill_loss",
    "pkt_loss",
    "cross_entropy",
    "mi_divergence_measure",
]


@dataclass
class LossValue:
    """A scalar loss with its kind tag and, for feature losses, a layer index."""

    tensor: Tensor
    kind: str
    layer: int | None = None

    @property
    def value(self) -> float:
        return self.tensor.data.item()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def mse_feature_loss(pruned: Tensor, student: Tensor, layer: int | None = None) -> LossValue:
    """Squared-L2 distance between aligned feature maps, averaged over the batch.

    The two maps must already have identical shapes; a mismatch means the
    pruning rate does not align teacher and student widths.
    """
    pruned, student = _as_tensor(pruned), _as_tensor(student)
    if pruned.shape != student.shape:
        raise AlignmentError(
            f"feature shapes {pruned.shape} vs {student.shape} do not align; "
            "check the pruning rate against the student widths"
        )
    n = pruned.shape[0] if pruned.ndim > 1 else 1
    diff = pruned - student
    total = (diff * diff).sum()
    return LossValue(total * (1.0 / n), "mse", layer)


def kl_distill_loss(teacher_logits: Tensor, student_logits: Tensor,
                    temperature: float = 1.0) -> LossValue:
    """KL(teacher softened || student softened) * T^2, averaged over the batch."""
    u, v = _as_tensor(teacher_logits), _as_tensor(student_logits)
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    if u.shape != v.shape:
        raise DimensionError(f"logit shapes differ: {u.shape} vs {v.shape}")
    if u.ndim == 1:
        u, v = u.reshape(1, -1), v.reshape(1, -1)
    n = u.shape[0]
    log_qt = log_softmax(u, temperature)
    log_qs = log_softmax(v, temperature)
    qt = log_qt.exp()
    per_sample = (qt * (log_qt - log_qs)).sum(axis=1)
    return LossValue(per_sample.sum() * (temperature * temperature / n), "kl")


_PKT_EPS = 1e-7


def _similarity_distribution(features: Tensor, mask: np.ndarray) -> Tensor:
    """Row-conditional distribution over cosine-kernel similarities.

    Each vector is unit-normalized, pairwise cosine similarity is mapped to
    [0, 1] via (cos + 1)/2, the self-similarity diagonal is dropped, and each
    row is normalized over the remaining entries.
    """
    sq = (features * features).sum(axis=1, keepdims=True)
    norm = (sq + 1e-12) ** 0.5
    unit = features / (norm + _PKT_EPS)
    kernel = (unit @ unit.T + 1.0) * 0.5
    kernel = kernel * Tensor(mask, dtype=features.dtype)
    return kernel / kernel.sum(axis=1, keepdims=True)


def pkt_loss(teacher_features: Tensor, student_features: Tensor) -> LossValue:
    """Divergence between teacher and student pairwise-similarity distributions.

    Feature dimensionalities may differ; similarities are computed within
    each set, so the loss is invariant to positive per-vector rescaling.
    """
    ft, fs = _as_tensor(teacher_features), _as_tensor(student_features)
    if ft.ndim != 2 or fs.ndim != 2:
        raise DimensionError("pkt_loss expects 2-d (batch, dim) feature matrices")
    if ft.shape[0] != fs.shape[0]:
        raise DimensionError(f"batch axes differ: {ft.shape[0]} vs {fs.shape[0]}")
    n = ft.shape[0]
    if n < 2:
        raise ParameterError("pkt_loss needs a batch of at least 2 samples")
    mask = 1.0 - np.eye(n)
    pt = _similarity_distribution(ft, mask)
    ps = _similarity_distribution(fs, mask)
    log_ratio = (pt + _PKT_EPS).log() - (ps + _PKT_EPS).log()
    # Masked rows are exactly zero in pt, so the diagonal contributes nothing.
    return LossValue((pt * log_ratio).sum() * (1.0 / n), "pkt")


def cross_entropy(logits: Tensor, labels) -> LossValue:
    """Mean negative log-likelihood of integer labels under softmax logits."""
    logits = _as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    lab = np.asarray(labels).reshape(-1)
    log_probs = log_softmax(logits)
    nll = -pick_classes(log_probs, lab).mean()
    return LossValue(nll, "ce")


def mi_divergence_measure(model_t, model_s, dataset, batch_size: int = 128) -> float:
    """Mean penultimate-feature divergence over fixed evaluation batches.

    Both models run in eval mode over the dataset in storage order, split
    into consecutive batches; trailing chunks of fewer than 2 samples are
    skipped. Deterministic for a fixed dataset and batch size.
    """
    images = dataset.images if hasattr(dataset, "images") else np.asarray(dataset)
    n = images.shape[0]
    values = []
    with no_grad():
        for start in range(0, n, batch_size):
            xb = images[start : start + batch_size]
            if xb.shape[0] < 2:
                continue
            ft = model_t.penultimate(xb)
            fs = model_s.penultimate(xb)
            values.append(pkt_loss(ft, fs).value)
    if not values:
        raise ParameterError("dataset too small for a divergence batch (need >= 2 samples)")
    return float(np.mean(values))
