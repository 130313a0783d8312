"""Training objectives with analytic gradients with respect to logits.

Every public loss takes logit matrices and returns a :class:`LossValue`
whose ``grad`` has the shape of the logits (a tuple of arrays for losses of
several logit matrices). Probability-level helpers (``lovasz_class_terms``,
``a2d_discrepancy``, ``kl_divergence``) evaluate values on given probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

PROB_FLOOR = 1e-12


@dataclass
class LossValue:
    value: float
    grad: np.ndarray | tuple | dict


def _logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"logits must be 2-D [n, C], got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain NaN or Inf")
    return z


def _labels(labels, n: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"expected {n} labels, got {y.shape[0]}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    return y


def softmax(z) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = _logits(z)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = _logits(z)
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. softmax outputs ``p`` back to the logits."""
    return p * (grad_p - np.sum(grad_p * p, axis=1, keepdims=True))


def cross_entropy(logits, labels) -> LossValue:
    z = _logits(logits)
    n, c = z.shape
    y = _labels(labels, n, c)
    logp = log_softmax(z)
    rows = np.arange(n)
    value = -logp[rows, y].mean()
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return LossValue(float(value), grad / n)


def focal_loss(logits, labels, alpha=None, lam: float = 2.0) -> LossValue:
    """Class-weighted focal loss ``mean_m alpha[y_m] * -(1-p)^lam * log p``.

    ``p`` is the softmax probability of the true class. ``lam = 0`` with unit
    weights is exactly cross-entropy.
    """
    z = _logits(logits)
    n, c = z.shape
    y = _labels(labels, n, c)
    if lam < 0:
        raise ValueError("focal exponent must be non-negative")
    alpha = np.ones(c) if alpha is None else np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.shape[0] != c or np.any(alpha <= 0):
        raise ValueError("alpha needs one positive weight per class")
    logp = log_softmax(z)
    p = np.exp(logp)
    rows = np.arange(n)
    logpy = logp[rows, y]
    py = p[rows, y]
    q = 1.0 - py
    a = alpha[y]
    value = np.mean(a * -(q ** lam) * logpy)
    # d/dz_j = a * [lam q^(lam-1) p log p - q^lam] * (onehot_j - p_j)
    if lam == 0:
        slope = -np.ones(n)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            first = np.where(q > 0, lam * q ** (lam - 1.0) * py * logpy, 0.0)
        slope = first - q ** lam
    coef = a * slope
    onehot = np.zeros_like(p)
    onehot[rows, y] = 1.0
    grad = coef[:, None] * (onehot - p) / n
    return LossValue(float(value), grad)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss for sorted errors."""
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if gt_sorted.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("probabilities must be 2-D [n, C]")
    if np.any(p < -1e-12) or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("probability rows must be non-negative and sum to 1")
    return p


def lovasz_class_terms(probs, labels):
    """Per-class Lovasz-extension terms and their gradients w.r.t. ``probs``.

    Returns ``(terms, present, grad)``: ``terms[c]`` is the Lovasz extension
    of the Jaccard loss for class ``c`` evaluated at the error vector
    ``|1{y=c} - p_c|``; ``present[c]`` marks classes occurring in ``labels``;
    ``grad[:, c]`` is ``d terms[c] / d probs[:, c]``.
    """
    p = _check_probs(probs)
    n, c = p.shape
    y = _labels(labels, n, c)
    terms = np.zeros(c)
    grad = np.zeros_like(p)
    present = np.zeros(c, dtype=bool)
    for k in range(c):
        fg = (y == k).astype(np.float64)
        present[k] = fg.any()
        errors = np.abs(fg - p[:, k])
        perm = np.argsort(-errors, kind="stable")
        w = lovasz_grad(fg[perm])
        terms[k] = float(errors[perm] @ w)
        sign = np.where(fg[perm] > 0, -1.0, 1.0)
        grad[perm, k] = w * sign
    return terms, present, grad


def lovasz_softmax(logits, labels) -> LossValue:
    """Lovasz-softmax loss averaged over the classes present in ``labels``."""
    z = _logits(logits)
    p = softmax(z)
    terms, present, gp = lovasz_class_terms(p, labels)
    k = int(present.sum())
    value = float(terms[present].mean())
    gp = np.where(present[None, :], gp, 0.0) / k
    return LossValue(value, softmax_backward(p, gp))


def entropy_max_loss(logits) -> LossValue:
    """Mean negative entropy ``mean_m sum_c p log p`` in ``[-log C, 0]``.

    Minimizing it drives predictions toward uniform.
    """
    z = _logits(logits)
    n = z.shape[0]
    logp = log_softmax(z)
    p = np.exp(logp)
    plogp = p * logp
    neg_ent = plogp.sum(axis=1, keepdims=True)
    value = float(neg_ent.mean())
    grad = (plogp - p * neg_ent) / n
    return LossValue(value, grad)


def _drop_true(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    n, c = x.shape
    keep = np.ones((n, c), dtype=bool)
    keep[np.arange(n), y] = False
    return x[keep].reshape(n, c - 1)


def _l1(a, b):
    s = np.sign(a - b)
    return np.abs(a - b).sum(axis=1), s, -s


def _sqeuclidean(a, b):
    d = a - b
    return (d * d).sum(axis=1), 2 * d, -2 * d


DISTANCES: dict[str, Callable] = {"l1": _l1, "sqeuclidean": _sqeuclidean}


def _distance(distance):
    if callable(distance):
        return distance
    try:
        return DISTANCES[distance]
    except KeyError:
        raise ValueError(f"unknown distance {distance!r}; choose from {sorted(DISTANCES)}") from None


def a2d_discrepancy(probs_c, probs_l, labels, distance="l1") -> np.ndarray:
    """Per-row distance between the two modalities' non-ground-truth predictions.

    The true-class column is removed and the remaining ``C-1`` probabilities
    renormalized before applying ``distance``.
    """
    pc, pl = _check_probs(probs_c), _check_probs(probs_l)
    if pc.shape != pl.shape:
        raise ValueError("modality predictions must have the same shape")
    n, c = pc.shape
    if c < 2:
        raise ValueError("A2D needs at least 2 classes")
    y = _labels(labels, n, c)
    qc, ql = _drop_true(pc, y), _drop_true(pl, y)
    qc = qc / np.maximum(qc.sum(axis=1, keepdims=True), PROB_FLOOR)
    ql = ql / np.maximum(ql.sum(axis=1, keepdims=True), PROB_FLOOR)
    return _distance(distance)(qc, ql)[0]


def a2d_loss(logits_c, logits_l, labels, distance="l1") -> LossValue:
    """Agree-to-disagree loss ``-mean_m D(O_c_bar, O_l_bar)``.

    ``distance`` is ``"l1"`` (default), ``"sqeuclidean"`` or a callable
    ``(a, b) -> (d, dd/da, dd/db)`` over row batches. The gradient w.r.t. each
    true-class logit is zero, since renormalizing the remaining probabilities
    equals a softmax over the remaining logits.
    """
    zc, zl = _logits(logits_c), _logits(logits_l)
    if zc.shape != zl.shape:
        raise ValueError("modality logits must have the same shape")
    n, c = zc.shape
    if c < 2:
        raise ValueError("A2D needs at least 2 classes")
    y = _labels(labels, n, c)
    qc, ql = softmax(_drop_true(zc, y)), softmax(_drop_true(zl, y))
    dist, dqc, dql = _distance(distance)(qc, ql)
    value = -float(np.mean(dist))
    grads = []
    for q, dq in ((qc, dqc), (ql, dql)):
        gz = softmax_backward(q, -dq / n)
        full = np.zeros((n, c))
        keep = np.ones((n, c), dtype=bool)
        keep[np.arange(n), y] = False
        full[keep] = gz.reshape(-1)
        grads.append(full)
    return LossValue(value, tuple(grads))


def kl_divergence(p, q) -> np.ndarray:
    """Row-wise ``KL(p || q)`` with ``0 log(0/q) = 0`` and ``q`` floored at 1e-12."""
    p, q = _check_probs(p), _check_probs(q)
    q = np.maximum(q, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(q)), 0.0)
    return terms.sum(axis=1)


def xmuda_loss(logits_c, logits_l, logits_fused) -> LossValue:
    """Cross-modal consistency ``mean_m [KL(O_c || O) + KL(O_l || O)]``.

    Gradients flow into all three logit matrices.
    """
    zc, zl, zf = _logits(logits_c), _logits(logits_l), _logits(logits_fused)
    if not zc.shape == zl.shape == zf.shape:
        raise ValueError("all three logit matrices must have the same shape")
    n = zc.shape[0]
    lc, ll, lf = log_softmax(zc), log_softmax(zl), log_softmax(zf)
    pc, pl, pf = np.exp(lc), np.exp(ll), np.exp(lf)
    kl_c = np.sum(pc * (lc - lf), axis=1, keepdims=True)
    kl_l = np.sum(pl * (ll - lf), axis=1, keepdims=True)
    value = float(np.mean(kl_c + kl_l))
    g_c = pc * (lc - lf - kl_c) / n
    g_l = pl * (ll - lf - kl_l) / n
    g_f = (2.0 * pf - pc - pl) / n
    return LossValue(value, (g_c, g_l, g_f))


@dataclass
class CombinedLossConfig:
    """Weights and composition of the total objective.

    ``gamma2`` defaults to 1.0 for A2D and 0.5 for xMUDA.
    """

    gamma1: float = 3.0
    gamma2: float | None = None
    mode: str = "detection"
    cross_modal: str = "none"

    def __post_init__(self):
        if self.mode not in ("segmentation", "detection"):
            raise ValueError("mode must be 'segmentation' or 'detection'")
        if self.cross_modal not in ("none", "a2d", "xmuda"):
            raise ValueError("cross_modal must be 'none', 'a2d' or 'xmuda'")
        if self.gamma2 is None:
            self.gamma2 = {"none": 0.0, "a2d": 1.0, "xmuda": 0.5}[self.cross_modal]
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("loss weights must be non-negative")


#: logit matrices each loss part differentiates, in the order of its ``grad`` tuple
PART_TARGETS: dict[str, tuple[str, ...]] = {
    "cls": ("fused",),
    "focal": ("fused",),
    "lovasz": ("fused",),
    "ent": ("outlier",),
    "a2d": ("modal_c", "modal_l"),
    "xmuda": ("modal_c", "modal_l", "fused"),
}


def part_weights(cfg: CombinedLossConfig) -> dict[str, float]:
    if cfg.mode == "segmentation":
        w = {"focal": 1.0, "lovasz": 1.0}
    else:
        w = {"cls": 1.0}
    w["ent"] = cfg.gamma1
    if cfg.cross_modal != "none":
        w[cfg.cross_modal] = cfg.gamma2
    return w


def combined_loss(parts: Mapping[str, LossValue], cfg: CombinedLossConfig) -> LossValue:
    """Weighted sum of loss parts.

    Segmentation: ``focal + lovasz + gamma1 ent``; detection:
    ``cls + gamma1 ent``; plus ``gamma2`` times ``a2d`` or ``xmuda`` when
    enabled. The returned ``grad`` maps each logit role (see
    ``PART_TARGETS``) to its accumulated weighted gradient. ``ent`` may be
    omitted when ``gamma1 == 0``.
    """
    weights = part_weights(cfg)
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, w in weights.items():
        if name not in parts:
            if name == "ent" and w == 0:
                continue
            raise ValueError(f"loss part {name!r} is required by this configuration")
        part = parts[name]
        value += w * part.value
        g = part.grad if isinstance(part.grad, tuple) else (part.grad,)
        for role, gi in zip(PART_TARGETS[name], g):
            grads[role] = grads[role] + w * gi if role in grads else w * gi
    return LossValue(float(value), grads)
