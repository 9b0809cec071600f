"""The three task loss terms and their weighted joint combination.

The joint loss is w_label * L_label + w_edge * L_edge + w_node * L_node.
The default weighting treats the supervised label loss as primary
(w_label = 1, self-supervised terms 0.1 each); ``LossWeights.eq9()`` gives
the alternative reading with the node term unweighted and the label term
scaled by 0.1. Degenerate graphs skip a term: it contributes exactly zero
and its count records zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class EmptyBatch(ValueError):
    pass


class EmptySample(ValueError):
    pass


class AllTermsSkipped(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_label: float = 1.0
    w_edge: float = 0.1
    w_node: float = 0.1

    def __post_init__(self):
        if self.w_label < 0 or self.w_edge < 0 or self.w_node < 0:
            raise ValueError("loss weights must be non-negative")
        if self.w_label == self.w_edge == self.w_node == 0:
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def eq9(cls) -> "LossWeights":
        """Node term unweighted, edge and label terms scaled by 0.1."""
        return cls(w_label=0.1, w_edge=0.1, w_node=1.0)


@dataclass
class LossBreakdown:
    l_label: float
    l_edge: float
    l_node: float
    joint: Tensor
    counts: tuple[int, int, int]  # (labels used, bond pairs used, contexts used)


def property_loss(logits: Tensor, labels) -> Tensor:
    """Mean two-class cross entropy over a batch of logit pairs."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise EmptyBatch(f"expected non-empty [k, 2] logits, got shape {logits.shape}")
    if logits.shape[1] != 2:
        raise ad.ShapeMismatch(f"two-class logits required, got {logits.shape[1]} columns")
    if labels.shape != (logits.shape[0],):
        raise ad.ShapeMismatch("one label per logit pair required")
    return ad.mean(ad.cross_entropy_rows(logits, labels))


def bond_loss(scores: Tensor, is_bond) -> Tensor:
    """Mean binary cross entropy over sampled pair scores (raw inner products)."""
    flags = np.asarray(is_bond, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] == 0:
        raise EmptySample("bond loss needs at least one sampled pair")
    if flags.shape != scores.shape:
        raise ad.ShapeMismatch("one bond flag per score required")
    return ad.mean(ad.binary_cross_entropy(scores, flags))


def atom_loss(type_logits: Tensor, targets) -> Tensor:
    """Mean 118-class cross entropy; targets are atomic numbers in [1, 118]."""
    targets = np.asarray(targets, dtype=np.intp)
    if type_logits.ndim != 2 or type_logits.shape[0] == 0:
        raise EmptySample("atom loss needs at least one sampled center")
    if targets.shape != (type_logits.shape[0],):
        raise ad.ShapeMismatch("one target per logit row required")
    if targets.min() < 1 or targets.max() > type_logits.shape[1]:
        raise ValueError("atom targets must be atomic numbers within the vocabulary")
    return ad.mean(ad.cross_entropy_rows(type_logits, targets - 1))


def joint_loss(label_term: Tensor | None, edge_term: Tensor | None,
               node_term: Tensor | None, weights: LossWeights,
               counts: tuple[int, int, int]) -> LossBreakdown:
    """Weighted sum of the present terms; skipped terms contribute exactly 0."""
    if label_term is None and edge_term is None and node_term is None:
        raise AllTermsSkipped("every loss term was skipped for this graph set")
    total: Tensor | None = None

    def accumulate(acc: Tensor | None, term: Tensor | None, weight: float) -> Tensor | None:
        if term is None or weight == 0.0:
            return acc
        piece = ad.scale(term, weight)
        return piece if acc is None else ad.add(acc, piece)

    total = accumulate(total, node_term, weights.w_node)
    total = accumulate(total, edge_term, weights.w_edge)
    total = accumulate(total, label_term, weights.w_label)
    if total is None:
        # all present terms carry zero weight; the joint loss is exactly zero
        total = ad.constant(0.0)
    return LossBreakdown(
        l_label=float(label_term.value) if label_term is not None else 0.0,
        l_edge=float(edge_term.value) if edge_term is not None else 0.0,
        l_node=float(node_term.value) if node_term is not None else 0.0,
        joint=total,
        counts=counts,
    )
