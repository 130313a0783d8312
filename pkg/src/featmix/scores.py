"""Post-hoc OOD scores from logits, all oriented so that higher means more ID.

Formulas follow the original methods: MSP (max softmax probability),
MaxLogit, Energy (``T * logsumexp(z / T)``), Entropy (negated Shannon
entropy) and GEN (negated generalized entropy over the top-M probabilities,
``-sum p^g (1-p)^g``).
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .losses import log_softmax

METHODS = ("maxlogit", "msp", "energy", "entropy", "gen")


def _logits(lm) -> np.ndarray:
    z = np.asarray(lm, dtype=np.float64)
    if z.ndim != 2 or not np.all(np.isfinite(z)):
        raise ValueError("logits must be a finite 2-D array")
    return z


def msp(lm) -> np.ndarray:
    return np.exp(log_softmax(_logits(lm))).max(axis=1)


def maxlogit(lm) -> np.ndarray:
    return _logits(lm).max(axis=1)


def energy(lm, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("energy temperature must be positive")
    return temperature * logsumexp(_logits(lm) / temperature, axis=1)


def neg_entropy(lm) -> np.ndarray:
    logp = log_softmax(_logits(lm))
    return np.sum(np.exp(logp) * logp, axis=1)


def gen(lm, gamma: float = 0.1, top_m: int | None = None) -> np.ndarray:
    z = _logits(lm)
    c = z.shape[1]
    if not 0 < gamma < 1:
        raise ValueError("GEN gamma must lie in (0, 1)")
    m = min(10, c) if top_m is None else int(top_m)
    if not 1 <= m <= c:
        raise ValueError(f"GEN top_m must lie in 1..{c}")
    p = np.exp(log_softmax(z))
    top = -np.sort(-p, axis=1)[:, :m]
    return -np.sum(top ** gamma * (1.0 - top) ** gamma, axis=1)


def score(lm, method: str = "maxlogit", temperature: float = 1.0,
          gamma: float = 0.1, top_m: int | None = None) -> np.ndarray:
    """Per-row OOD score (higher = more ID) by method name."""
    if method == "maxlogit":
        return maxlogit(lm)
    if method == "msp":
        return msp(lm)
    if method == "energy":
        return energy(lm, temperature)
    if method == "entropy":
        return neg_entropy(lm)
    if method == "gen":
        return gen(lm, gamma, top_m)
    raise ValueError(f"unknown score method {method!r}; choose from {METHODS}")


def threshold_decide(scores, eta: float) -> np.ndarray:
    """True (ID) where ``score >= eta``; ties go to ID."""
    return np.asarray(scores, dtype=np.float64) >= eta
