"""AUROC, AUPR, FPR@95 and closed-set accuracy.

Scores are higher-is-ID. AUROC is the Mann-Whitney probability that an ID row
outscores an OOD row (ties count one half). AUPR treats OOD as the positive
class ranked by the negated score, computed as step-wise average precision
with tied scores grouped. FPR@95 uses the strictest threshold that still
accepts at least 95% of ID rows (``score >= threshold`` is ID).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

CSV_COLUMNS = ("auroc", "aupr", "fpr_at_95", "id_accuracy", "n_id", "n_ood")


@dataclass(frozen=True)
class MetricsReport:
    auroc: float
    aupr: float
    fpr_at_95: float
    id_accuracy: float
    n_id: int
    n_ood: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(CSV_COLUMNS)
        w.writerow([repr(getattr(self, c)) if isinstance(getattr(self, c), float) else getattr(self, c)
                    for c in CSV_COLUMNS])
        return buf.getvalue()


def _split(scores, is_ood):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    o = np.asarray(is_ood, dtype=bool).reshape(-1)
    if s.shape != o.shape:
        raise ValueError("scores and is_ood must have the same length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_ood = int(o.sum())
    n_id = s.size - n_ood
    if n_id < 1 or n_ood < 1:
        raise ValueError("need at least one ID and one OOD row")
    return s, o, n_id, n_ood


def auroc(scores, is_ood) -> float:
    s, o, n_id, n_ood = _split(scores, is_ood)
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[~o].sum() - n_id * (n_id + 1) / 2.0
    return float(u / (n_id * n_ood))


def brute_force_auroc(scores, is_ood, max_pairs: int = 10**6) -> float:
    """O(n_id * n_ood) pairwise AUROC with half-weight ties (test oracle)."""
    s, o, n_id, n_ood = _split(scores, is_ood)
    if n_id * n_ood > max_pairs:
        raise ValueError(f"{n_id}*{n_ood} pairs exceeds the limit of {max_pairs}")
    a, b = s[~o][:, None], s[o][None, :]
    wins = np.count_nonzero(a > b) + 0.5 * np.count_nonzero(a == b)
    return float(wins / (n_id * n_ood))


def aupr_ood(scores, is_ood) -> float:
    """Average precision with OOD rows as positives, ranked by ``-score``."""
    s, o, _, n_ood = _split(scores, is_ood)
    neg = -s
    order = np.argsort(-neg, kind="mergesort")
    neg, pos = neg[order], o[order].astype(np.float64)
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(neg) != 0), neg.size - 1]
    tp = np.cumsum(pos)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_ood
    recall_prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - recall_prev) * precision))


def fpr_at_tpr(scores, is_ood, tpr: float = 0.95) -> float:
    """Fraction of OOD rows accepted at the largest threshold with ID TPR >= ``tpr``."""
    s, o, n_id, _ = _split(scores, is_ood)
    id_sorted = np.sort(s[~o])[::-1]
    k = math.ceil(tpr * n_id - 1e-9)
    thr = id_sorted[max(k, 1) - 1]
    return float(np.mean(s[o] >= thr))


def id_accuracy(lm, labels) -> float:
    """Fraction of rows whose argmax logit equals the label (ties -> lowest index)."""
    z = np.asarray(lm, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise ValueError("logits and labels disagree in length")
    if y.size == 0:
        raise ValueError("no rows to evaluate")
    return float(np.mean(np.argmax(z, axis=1) == y))


def compute_ood_metrics(scores, is_ood, accuracy: float = float("nan")) -> MetricsReport:
    s, o, n_id, n_ood = _split(scores, is_ood)
    return MetricsReport(
        auroc=auroc(s, o),
        aupr=aupr_ood(s, o),
        fpr_at_95=fpr_at_tpr(s, o, 0.95),
        id_accuracy=float(accuracy),
        n_id=n_id,
        n_ood=n_ood,
    )
