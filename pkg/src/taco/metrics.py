"""ROC-AUC for binary and multiclass (one-vs-one) predictions."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


def roc_auc_binary(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties count 1/2.

    Computed from midranks (the Mann-Whitney U statistic), which equals the
    pairwise count exactly.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores for {y.size} labels")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = int((y == 0).sum())
    if n1 + n0 != y.size:
        raise DataError("binary labels must be 0 or 1")
    if n1 == 0 or n0 == 0:
        raise DataError("ROC-AUC needs both classes present")
    r = rankdata(s)
    u = r[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def roc_auc_ovo(proba, labels, weighting: str = "macro") -> float:
    """Average binary AUC over ordered class pairs ``(i, j)``, ``i != j``.

    For each pair, rows labelled ``i`` or ``j`` are scored by
    ``p_i / (p_i + p_j)`` with ``i`` as the positive class.  Pairs whose
    classes are not both present are skipped.  ``weighting='prevalence'``
    weights each pair by its share of rows instead of uniformly.
    """
    P = np.asarray(proba, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if P.ndim != 2 or P.shape[0] != y.size:
        raise DataError(f"probabilities {P.shape} do not match {y.size} labels")
    C = P.shape[1]
    if C < 2:
        raise DataError("need at least two classes")
    present = [c for c in range(C) if (y == c).any()]
    if len(present) < 2:
        raise DataError("ROC-AUC needs at least two classes present")
    if weighting not in ("macro", "prevalence"):
        raise ValueError(f"unknown weighting {weighting!r}")
    vals, weights = [], []
    for i in present:
        for j in present:
            if i == j:
                continue
            rows = (y == i) | (y == j)
            pi, pj = P[rows, i], P[rows, j]
            den = pi + pj
            score = np.divide(pi, den, out=np.full_like(pi, 0.5), where=den > 0)
            vals.append(roc_auc_binary(score, (y[rows] == i).astype(int)))
            weights.append(rows.sum())
    w = np.ones(len(vals)) if weighting == "macro" else np.asarray(weights, dtype=np.float64)
    return float(np.dot(vals, w) / w.sum())


def roc_auc(proba, labels) -> float:
    """Binary AUC on the class-1 column for two classes, one-vs-one otherwise."""
    P = np.asarray(proba)
    if P.shape[1] == 2:
        return roc_auc_binary(P[:, 1], labels)
    return roc_auc_ovo(P, labels)
