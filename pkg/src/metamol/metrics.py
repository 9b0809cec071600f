"""ROC-AUC and embedding export.

AUC follows the rank-statistic formulation: the probability that a random
positive scores above a random negative, counting ties as half. The
sort-based implementation is O(n log n); the quadratic pair-counting
oracle lives in the test suite.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ParameterSet, no_trace
from .encoder import EncoderConfig, GraphBatch, encode_batch
from .smiles import MolecularGraph


class DegenerateLabels(ValueError):
    pass


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via tied ranks.

    Requires at least one positive and one negative label.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs at least one positive and one negative")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # tied block shares the average 1-based rank
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def export_embeddings(molecules: list[tuple[str, MolecularGraph, int]],
                      params: ParameterSet, cfg: EncoderConfig,
                      destination) -> int:
    """Write one CSV row per molecule: identifier, label, then the embedding.

    Floats are written with 17 significant digits so a re-import reproduces
    the in-memory values. Returns the number of rows written.
    """
    if not molecules:
        raise ValueError("nothing to export: empty molecule list")
    batch = GraphBatch([graph for _, graph, _ in molecules], cfg.aggregator)
    with no_trace():
        _, embeddings = encode_batch(batch, params, cfg)
    values = embeddings.value
    header = "identifier,label," + ",".join(f"e{i}" for i in range(values.shape[1]))
    lines = [header]
    for row, (identifier, _, label) in zip(values, molecules):
        lines.append(f"{identifier},{label}," + ",".join(f"{x:.17g}" for x in row))
    text = "\n".join(lines) + "\n"
    try:
        with open(destination, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"failed writing embeddings to {destination}: {exc}") from exc
    return len(molecules)
