"""The four scalar objectives and their joint sum.

All four share one log-ratio skeleton: a temperature-scaled dot-product
softmax followed by negative log-probabilities of designated positives.

* ``ce``: plain classification cross-entropy over the C class logits.
* ``info_nce``: (K+1)-way softmax singling out one positive key.
* ``cce``: the classifier-head contrastive loss. For query i the softmax
  runs along the key-bank dimension: similarities of the *query's class
  prototype* w_{y_i} against the bank rows. Slot 0 of the bank is the
  query's own live normalized feature, so the numerator term is always
  one of the denominator terms; the per-query log-ratio is counted once
  per positive key (multiplicity |S_i| in the default "literal" variant,
  or with per-key numerators in the "per_key" variant).
* ``ccl``: the projector-head contrastive loss, where every key sharing the
  query's class is a positive, slot 0 (the query's own momentum key)
  included, so the positive set is never empty.
* ``joint_total``: the unweighted sum of the enabled terms. Weights
  exist only so an ablation can switch terms off (weight 0); defaults
  are all 1 and no tuning is intended.

Batch reduction is a plain sum by default; "mean" divides every term by
the batch size so the three terms stay mutually comparable either way.
All keys enter as grad-disabled tensors: gradients flow to the live
features and prototypes only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .keypool import KeyBatch
from .ndgrad import Tensor

CCE_VARIANTS = ("literal", "per_key")
REDUCTIONS = ("sum", "mean")


class NoEnabledTermError(ValueError):
    """joint_total was asked for with every term disabled."""


@dataclass
class LossTerms:
    """Scalar loss tensors plus the weights selecting which enter the total."""

    ce: Tensor | None = None
    cce: Tensor | None = None
    ccl: Tensor | None = None
    total: Tensor | None = None
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def enabled(self) -> tuple[bool, bool, bool]:
        return tuple(w != 0.0 for w in self.weights)

    def values(self) -> dict[str, float | None]:
        def val(t: Tensor | None) -> float | None:
            return None if t is None else t.item()

        return {"ce": val(self.ce), "cce": val(self.cce), "ccl": val(self.ccl), "total": val(self.total)}


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return tau


def _check_labels(labels: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise IndexError(f"label out of range [0, {class_count})")
    return labels


def _reduce(loss: Tensor, reduction: str, batch: int) -> Tensor:
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    if reduction == "mean":
        return nd.scale_by_scalar(loss, 1.0 / batch)
    return loss


def ce(logits: Tensor, labels: np.ndarray, reduction: str = "sum") -> Tensor:
    """Cross-entropy over class logits, summed over the batch."""
    b, c = logits.shape
    labels = _check_labels(labels, c)
    if labels.shape[0] != b:
        raise nd.ShapeError(f"{labels.shape[0]} labels for batch of {b}")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = nd.sum(nd.mul(nd.log_softmax_row(logits), Tensor(onehot)))
    return _reduce(nd.scale_by_scalar(picked, -1.0), reduction, b)


def info_nce(q: Tensor, keys: KeyBatch, positive_index: int, tau: float) -> Tensor:
    """One-positive contrastive loss of a unit query against K+1 unit keys."""
    tau = _check_tau(tau)
    if q.data.ndim != 2 or q.shape[0] != 1:
        raise nd.ShapeError(f"query must be a (1 x L) row, got {q.shape}")
    n = keys.size + 1
    if not 0 <= positive_index < n:
        raise IndexError(f"positive_index {positive_index} out of range [0, {n})")
    sims = nd.scale_by_scalar(nd.matmul(q, nd.transpose(keys.z_keys)), 1.0 / tau)
    mask = np.zeros((1, n))
    mask[0, positive_index] = 1.0
    return nd.scale_by_scalar(nd.sum(nd.mul(nd.log_softmax_row(sims), Tensor(mask))), -1.0)


def _bank_with_live_slot0(h_query_row: Tensor, keys: KeyBatch) -> Tensor:
    """Key bank for cce: the query's live feature in slot 0, sampled keys after."""
    if keys.size == 0:
        return h_query_row
    rest = nd.select_rows(keys.h_keys, np.arange(1, keys.size + 1))
    return nd.concat_rows([h_query_row, rest])


def cce(
    h_q_norm: Tensor,
    labels: np.ndarray,
    W: Tensor,
    keys: list[KeyBatch],
    tau: float,
    variant: str = "literal",
    reduction: str = "sum",
) -> Tensor:
    """Classifier-head contrastive loss along the key-bank dimension.

    For each query the class prototype w_{y_i} is scored against the K+1
    bank rows; the resulting log-ratio of slot 0 is weighted by the size
    of the positive set ("literal"), or replaced by one log-probability
    per positive bank slot ("per_key").
    """
    tau = _check_tau(tau)
    if variant not in CCE_VARIANTS:
        raise ValueError(f"variant must be one of {CCE_VARIANTS}, got {variant!r}")
    b, d = h_q_norm.shape
    c = W.shape[0]
    labels = _check_labels(labels, c)
    if len(keys) != b or labels.shape[0] != b:
        raise nd.ShapeError(f"need one key batch and label per query ({b}), got {len(keys)}/{labels.shape[0]}")
    total: Tensor | None = None
    for i in range(b):
        kb = keys[i]
        y = int(labels[i])
        if int(kb.labels[0]) != y:
            raise ValueError(f"key batch {i}: slot-0 label {kb.labels[0]} != query label {y}")
        if kb.h_keys.shape[1] != d:
            raise nd.ShapeError(f"key batch {i}: key dim {kb.h_keys.shape[1]} != feature dim {d}")
        bank = _bank_with_live_slot0(nd.select_rows(h_q_norm, [i]), kb)
        proto = nd.select_rows(W, [y])
        sims = nd.scale_by_scalar(nd.matmul(proto, nd.transpose(bank)), 1.0 / tau)
        logp = nd.log_softmax_row(sims)
        positives = kb.positive_mask(y)
        if variant == "literal":
            mask = np.zeros((1, kb.size + 1))
            mask[0, 0] = 1.0
            term = nd.scale_by_scalar(nd.sum(nd.mul(logp, Tensor(mask))), -float(positives.sum()))
        else:
            term = nd.scale_by_scalar(nd.sum(nd.mul(logp, Tensor(positives[None, :].astype(float)))), -1.0)
        total = term if total is None else nd.add(total, term)
    return _reduce(total, reduction, b)


def ccl(
    z_q: Tensor,
    labels: np.ndarray,
    keys: list[KeyBatch],
    tau: float,
    reduction: str = "sum",
) -> Tensor:
    """Projector-head contrastive loss with all same-class keys positive."""
    tau = _check_tau(tau)
    b, L = z_q.shape
    labels = np.asarray(labels, dtype=np.int64)
    if len(keys) != b or labels.shape[0] != b:
        raise nd.ShapeError(f"need one key batch and label per query ({b}), got {len(keys)}/{labels.shape[0]}")
    total: Tensor | None = None
    for i in range(b):
        kb = keys[i]
        y = int(labels[i])
        if int(kb.labels[0]) != y:
            raise ValueError(f"key batch {i}: slot-0 label {kb.labels[0]} != query label {y}")
        if kb.z_keys.shape[1] != L:
            raise nd.ShapeError(f"key batch {i}: key dim {kb.z_keys.shape[1]} != projection dim {L}")
        q = nd.select_rows(z_q, [i])
        sims = nd.scale_by_scalar(nd.matmul(q, nd.transpose(kb.z_keys)), 1.0 / tau)
        logp = nd.log_softmax_row(sims)
        mask = kb.positive_mask(y)[None, :].astype(float)
        term = nd.scale_by_scalar(nd.sum(nd.mul(logp, Tensor(mask))), -1.0)
        total = term if total is None else nd.add(total, term)
    return _reduce(total, reduction, b)


def joint_total(terms: LossTerms) -> Tensor:
    """Weighted sum of the enabled terms; weight 0 disables a term.

    With the default all-ones weights this is exactly ce + cce + ccl.
    Sets ``terms.total`` and returns it.
    """
    parts: list[Tensor] = []
    for weight, term, name in zip(terms.weights, (terms.ce, terms.cce, terms.ccl), ("ce", "cce", "ccl")):
        if weight == 0.0:
            continue
        if term is None:
            raise ValueError(f"term {name!r} is enabled (weight {weight}) but was not computed")
        parts.append(term if weight == 1.0 else nd.scale_by_scalar(term, weight))
    if not parts:
        raise NoEnabledTermError("every loss term is disabled")
    total = parts[0]
    for p in parts[1:]:
        total = nd.add(total, p)
    terms.total = total
    return total
