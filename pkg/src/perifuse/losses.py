"""Training objectives: identity cross-entropy, per-attribute binary
cross-entropy, their joint sum, and the pairwise contrastive losses used to
couple the Siamese twins.

All losses are built from taped autodiff primitives, so they are
differentiable end to end whenever their inputs carry a tape.  Probabilities
are clamped to [1e-7, 1] before any log.  The L2 regularization term that
accompanies the classification objective is realized as optimizer weight
decay (see :mod:`perifuse.train`), not added here, to avoid regularizing
twice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    add_const,
    clamp,
    cmul,
    log,
    mul,
    pairwise_sqdist,
    pick,
    relu,
    scale,
    sigmoid,
    softmax,
    sqrt,
    sum_all,
)

__all__ = [
    "LossError",
    "LossValue",
    "PROB_FLOOR",
    "cross_entropy",
    "classification_loss",
    "attribute_loss",
    "joint_loss",
    "contrastive",
    "coupled_loss",
]

PROB_FLOOR = 1e-7


class LossError(ValueError):
    """Raised on malformed labels or mismatched loss inputs."""


@dataclass
class LossValue:
    """A scalar objective plus its named components for logging."""

    value: Tensor
    components: dict[str, float] = field(default_factory=dict)

    @property
    def scalar(self) -> float:
        return float(self.value.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _check_index_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise LossError(f"expected 1-d label indices, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LossError(f"label index out of range for {n_classes} classes")
    return labels.astype(np.int64)


def cross_entropy(pred_probs, labels) -> Tensor:
    """Mean over the batch of -sum_m y_m ln(p_m) for probability rows.

    ``labels`` may be class indices [N] or one-hot rows [N, C].  Rows of
    ``pred_probs`` must sum to 1 within 1e-5; probabilities are clamped to
    [1e-7, 1] before the log.
    """
    probs = _as_tensor(pred_probs)
    if probs.data.ndim != 2:
        raise LossError(f"cross_entropy: need [N, C] probabilities, got {probs.shape}")
    n, c = probs.shape
    row_sums = probs.data.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-5):
        raise LossError("cross_entropy: probability rows do not sum to 1")
    clamped = clamp(probs, PROB_FLOOR, 1.0)
    labels_arr = np.asarray(labels)
    if labels_arr.ndim == 2:
        if labels_arr.shape != (n, c):
            raise LossError(f"cross_entropy: one-hot shape {labels_arr.shape} vs probs {probs.shape}")
        weighted = cmul(log(clamped), labels_arr)
        return scale(sum_all(weighted), -1.0 / n)
    idx = _check_index_labels(labels_arr, c)
    picked = pick(clamped, idx)
    return scale(sum_all(log(picked)), -1.0 / n)


def classification_loss(logits, labels) -> LossValue:
    """Softmax cross-entropy over identity logits, averaged over the batch.

    The companion L2 penalty on the weights lives in the optimizer's weight
    decay; nothing is added here.
    """
    logits = _as_tensor(logits)
    value = cross_entropy(softmax(logits), labels)
    return LossValue(value, {"ce": float(value.data)})


def _check_binary_labels(labels, shape) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.shape != shape:
        raise LossError(f"attribute labels shape {arr.shape} vs logits {shape}")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise LossError("attribute labels must be 0 or 1")
    return arr.astype(np.float64)


def attribute_loss(sb_logits, attr_labels, attr_mask=None) -> LossValue:
    """Binary cross-entropy per attribute head: sum over attributes, mean
    over the batch.

    ``attr_mask`` optionally restricts the loss (and therefore its gradient)
    to a subset of attribute columns.
    """
    logits = _as_tensor(sb_logits)
    if logits.data.ndim != 2:
        raise LossError(f"attribute_loss: need [N, k] logits, got {logits.shape}")
    n, k = logits.shape
    labels = _check_binary_labels(attr_labels, (n, k))
    mask_row = np.ones(k)
    if attr_mask is not None:
        mask_row = np.zeros(k)
        for t in attr_mask:
            if not 0 <= t < k:
                raise LossError(f"attribute mask index {t} out of range for k={k}")
            mask_row[t] = 1.0
    mask = np.broadcast_to(mask_row, (n, k))

    probs = sigmoid(logits)
    pos = cmul(log(clamp(probs, PROB_FLOOR, 1.0)), labels * mask)
    neg_probs = add_const(scale(probs, -1.0), 1.0)
    neg = cmul(log(clamp(neg_probs, PROB_FLOOR, 1.0)), (1.0 - labels) * mask)
    value = scale(sum_all(add(pos, neg)), -1.0 / n)
    return LossValue(value, {"attr": float(value.data)})


def joint_loss(jpr_logits, labels, sb_logits, attr_labels, attr_mask=None,
               attr_weight: float = 1.0) -> LossValue:
    """Joint objective: identity cross-entropy on the fused head plus the
    attribute loss, with unit weights by default."""
    ce = classification_loss(jpr_logits, labels)
    attr = attribute_loss(sb_logits, attr_labels, attr_mask=attr_mask)
    attr_term = attr.value if attr_weight == 1.0 else scale(attr.value, attr_weight)
    return LossValue(add(ce.value, attr_term),
                     {"ce": ce.scalar, "attr": attr.scalar})


def contrastive(z1, z2, c: int, m: float, form: str = "paper") -> float:
    """Contrastive loss for one pair of embedding vectors.

    c=0 marks a genuine pair (cost half the squared distance); c=1 an
    impostor pair (hinged at margin m).  With form="paper" the hinge acts on
    the squared distance, exactly as the objective is written; "conventional"
    hinges on the plain distance and squares the slack.
    """
    a = np.asarray(z1, dtype=np.float64).reshape(-1)
    b = np.asarray(z2, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise LossError(f"contrastive: embedding lengths {a.size} vs {b.size}")
    if c not in (0, 1):
        raise LossError(f"contrastive: pair label must be 0 or 1, got {c}")
    if m <= 0:
        raise LossError(f"contrastive: margin must be positive, got {m}")
    d2 = float(((a - b) ** 2).sum())
    if c == 0:
        return 0.5 * d2
    if form == "paper":
        return 0.5 * max(0.0, m - d2)
    if form == "conventional":
        return 0.5 * max(0.0, m - np.sqrt(d2)) ** 2
    raise LossError(f"contrastive: unknown form {form!r}")


def coupled_loss(embeddings, identities, m: float, form: str = "paper") -> Tensor:
    """Mean contrastive loss over all ordered pairs of a batch, self-pairs
    included (they are genuine at zero distance and contribute nothing).

    Differentiable w.r.t. ``embeddings``; the result is the batch estimate of
    the Siamese coupling objective.
    """
    z = _as_tensor(embeddings)
    if z.data.ndim != 2:
        raise LossError(f"coupled_loss: need [N, D] embeddings, got {z.shape}")
    n = z.shape[0]
    if n < 2:
        raise LossError("coupled_loss: need at least 2 embeddings")
    if m <= 0:
        raise LossError(f"coupled_loss: margin must be positive, got {m}")
    ids = np.asarray(identities)
    if ids.shape != (n,):
        raise LossError(f"coupled_loss: identities shape {ids.shape} vs embeddings {z.shape}")

    genuine = (ids[:, None] == ids[None, :]).astype(np.float64)
    impostor = 1.0 - genuine
    norm = 1.0 / (n * n)

    d2 = pairwise_sqdist(z)
    genuine_term = sum_all(cmul(d2, genuine * (0.5 * norm)))
    if form == "paper":
        slack = relu(add_const(scale(d2, -1.0), m))
        impostor_term = sum_all(cmul(slack, impostor * (0.5 * norm)))
    elif form == "conventional":
        dist = sqrt(add_const(d2, 1e-12))
        slack = relu(add_const(scale(dist, -1.0), m))
        impostor_term = sum_all(cmul(mul(slack, slack), impostor * (0.5 * norm)))
    else:
        raise LossError(f"coupled_loss: unknown form {form!r}")
    return add(genuine_term, impostor_term)
