"""Outlier synthesis in feature space.

Feature Mixing swaps ``n_swap`` randomly selected feature dimensions between
modality blocks. Three baselines are provided for comparison: Mixup-style
interpolation, VOS-style low-likelihood Gaussian sampling and an NP-Mix-style
nearest-neighbour expansion. The NP-Mix variant here is an approximation
built for speed/quality comparison only, not a faithful reimplementation.

Every synthesizer returns a :class:`SynthesisResult`. When the outliers are a
linear function of the inputs, ``pullback`` maps gradients with respect to the
outliers back onto the inputs, so training can differentiate through the
synthesis step.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (
    LabeledFeatureSet,
    ModalitySet,
    RandomSource,
    as_feature_matrix,
    concat,
    sample_index_subset,
)
from .gaussian import estimate_moments, mahalanobis_sq

Pullback = Callable[[list], list]

_CHUNK_ELEMS = 1 << 16


@dataclass
class MixingConfig:
    """Feature Mixing parameters.

    ``n_swap`` is the number of dimensions exchanged per modality. By default
    one selection is drawn per call and shared by every row of the batch;
    ``per_sample_masks`` draws an independent selection for each row.
    """

    n_swap: int
    per_sample_masks: bool = False
    rng: RandomSource = field(default_factory=lambda: RandomSource(0))

    def __post_init__(self):
        if self.n_swap < 0:
            raise ValueError("n_swap must be non-negative")


@dataclass
class SynthesisResult:
    outliers: ModalitySet
    masks_used: tuple = ()
    elapsed: float = 0.0
    info: dict = field(default_factory=dict)
    pullback: Optional[Pullback] = field(default=None, repr=False)


def _check_width(widths, n_swap):
    if n_swap > min(widths):
        raise ValueError(f"n_swap={n_swap} exceeds the narrowest block width {min(widths)}")


def _draw_selection(rng: RandomSource, width: int, n_swap: int, n_rows: int, per_sample: bool):
    if not per_sample:
        return sample_index_subset(rng, width, n_swap)
    # uniform ordered selection per row: first n_swap entries of a random permutation
    keys = rng.generator.random((n_rows, width))
    return np.argsort(keys, axis=1, kind="stable")[:, :n_swap]


def _cyclic_move(blocks, selections, shift):
    """Block i receives block (i + shift) % k at the selected positions.

    Reads always come from the unmodified inputs, so the move is simultaneous.
    """
    k = len(blocks)
    if selections[0].size == 0:
        return [b.copy() for b in blocks]
    if selections[0].ndim == 1:
        # row chunks keep the strided column writes cache-resident
        out = [np.empty_like(b) for b in blocks]
        n = blocks[0].shape[0]
        step = max(1, _CHUNK_ELEMS // sum(b.shape[1] for b in blocks))
        for s in range(0, n, step):
            e = s + step
            for i in range(k):
                out[i][s:e] = blocks[i][s:e]
            for i in range(k):
                j = (i + shift) % k
                out[i][s:e, selections[i]] = blocks[j][s:e, selections[j]]
    else:
        out = [b.copy() for b in blocks]
        rows = np.arange(blocks[0].shape[0])[:, None]
        for i in range(k):
            j = (i + shift) % k
            out[i][rows, selections[i]] = blocks[j][rows, selections[j]]
    return out


def _swap_result(ms: ModalitySet, cfg: MixingConfig, selections, t0) -> SynthesisResult:
    blocks = ms.blocks
    if selections is None:
        selections = tuple(
            _draw_selection(cfg.rng, w, cfg.n_swap, ms.n_rows, cfg.per_sample_masks)
            for w in ms.widths
        )
    else:
        selections = tuple(np.asarray(s, dtype=np.int64) for s in selections)
        if len(selections) != len(blocks):
            raise ValueError("one selection per block is required")
        if len({s.shape for s in selections}) != 1:
            raise ValueError("selections must all have the same shape")
        for s, w in zip(selections, ms.widths):
            if s.size and (s.min() < 0 or s.max() >= w):
                raise ValueError("selection index out of range")
    out = _cyclic_move(blocks, selections, 1)
    elapsed = time.perf_counter() - t0

    def pullback(grads):
        # inverse permutation: move gradients one block backwards
        return _cyclic_move([np.asarray(g) for g in grads], selections, -1)

    return SynthesisResult(ModalitySet(out, ms.names), selections, elapsed, pullback=pullback)


def feature_mixing(ms: ModalitySet, cfg: MixingConfig, selections=None) -> SynthesisResult:
    """Swap ``cfg.n_swap`` feature dimensions between two modality blocks.

    ``select_c`` and ``select_l`` are drawn independently from each block's
    width and matched by draw order: position ``p`` of ``select_c`` in the
    first block receives the value at ``select_l[p]`` of the second block and
    vice versa. All other entries are copied unchanged.

    ``selections`` fixes the ``(select_c, select_l)`` pair instead of drawing
    it; each may be 1-D (shared by all rows) or 2-D (one row per sample).
    """
    t0 = time.perf_counter()
    if len(ms) != 2:
        raise ValueError(f"feature_mixing expects 2 blocks, got {len(ms)}")
    _check_width(ms.widths, cfg.n_swap)
    return _swap_result(ms, cfg, selections, t0)


def feature_mixing_cyclic(ms: ModalitySet, cfg: MixingConfig, selections=None) -> SynthesisResult:
    """Tri- (or more) modal Feature Mixing by a cyclic swap.

    Block ``i`` receives block ``(i + 1) % k``'s values at the selected
    positions, simultaneously for all blocks.
    """
    t0 = time.perf_counter()
    if len(ms) < 3:
        raise ValueError("cyclic mixing needs at least 3 blocks; use feature_mixing for 2")
    _check_width(ms.widths, cfg.n_swap)
    return _swap_result(ms, cfg, selections, t0)


def feature_mixing_unimodal(fm, cfg: MixingConfig, selections=None) -> SynthesisResult:
    """Split one feature matrix into halves and mix them as two pseudo-modalities."""
    t0 = time.perf_counter()
    fm = as_feature_matrix(fm)
    width = fm.shape[1]
    if width % 2:
        raise ValueError(f"unimodal mixing needs an even width, got {width}")
    half = width // 2
    halves = ModalitySet([fm[:, :half], fm[:, half:]], ("left", "right"))
    _check_width(halves.widths, cfg.n_swap)
    res = _swap_result(halves, cfg, selections, t0)
    inner = res.pullback
    res.outliers = ModalitySet([concat(res.outliers)])

    def pullback(grads):
        g = np.asarray(grads[0])
        return [np.concatenate(inner([g[:, :half], g[:, half:]]), axis=1)]

    res.pullback = pullback
    res.elapsed = time.perf_counter() - t0
    return res


def mixup_synth(ms: ModalitySet, alpha: float, rng: RandomSource,
                lam=None, partners=None) -> SynthesisResult:
    """Interpolate each row with a random other row: ``lam*x_i + (1-lam)*x_j``.

    ``lam`` is drawn from Beta(alpha, alpha) per row unless given (scalar or
    per-row array); ``partners`` may fix ``j``.
    """
    t0 = time.perf_counter()
    n = ms.n_rows
    if n < 2:
        raise ValueError("mixup needs at least 2 rows")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    gen = rng.generator
    if partners is None:
        partners = (np.arange(n) + gen.integers(1, n, size=n)) % n
    partners = np.asarray(partners, dtype=np.int64)
    if lam is None:
        lam = gen.beta(alpha, alpha, size=n)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))[:, None]
    x = concat(ms)
    out = lam * x + (1.0 - lam) * x[partners]
    elapsed = time.perf_counter() - t0

    def pullback(grads):
        g = np.concatenate([np.asarray(b) for b in grads], axis=1)
        gx = lam * g
        np.add.at(gx, partners, (1.0 - lam) * g)
        return list(ms.split_like(gx).blocks)

    return SynthesisResult(ms.split_like(out), (), elapsed,
                           info={"lam": lam[:, 0].copy(), "partners": partners},
                           pullback=pullback)


def vos_synth(lfs: LabeledFeatureSet, n_candidates: int, keep_fraction: float,
              rng: RandomSource) -> SynthesisResult:
    """Sample low-likelihood outliers from per-class Gaussians.

    For each ID class a Gaussian is fitted to its concatenated features,
    ``n_candidates`` points are drawn from it and the ``keep_fraction`` with
    the largest Mahalanobis distance (lowest likelihood) are kept. The output
    has ``n_classes * n_keep`` rows, ordered by class. Outliers do not depend
    differentiably on the inputs (``pullback`` is None).
    """
    t0 = time.perf_counter()
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    if n_candidates < 1:
        raise ValueError("n_candidates must be positive")
    x = concat(lfs.features)
    ids = ~lfs.is_ood
    n_keep = max(1, int(round(keep_fraction * n_candidates)))
    kept, kept_labels, cand_d2, kept_d2 = [], [], [], []
    gen = rng.generator
    for c in np.unique(lfs.labels[ids]):
        xc = x[ids & (lfs.labels == c)]
        gm = estimate_moments(xc)
        z = gen.standard_normal((n_candidates, gm.dim))
        cand = gm.mean + z @ gm.chol.T
        d2 = mahalanobis_sq(cand, gm)
        order = np.argsort(-d2, kind="stable")[:n_keep]
        kept.append(cand[order])
        kept_labels.append(np.full(n_keep, c))
        cand_d2.append(d2)
        kept_d2.append(d2[order])
    out = np.concatenate(kept, axis=0)
    elapsed = time.perf_counter() - t0
    info = {
        "labels": np.concatenate(kept_labels),
        "candidate_d2": np.concatenate(cand_d2),
        "kept_d2": np.concatenate(kept_d2),
    }
    return SynthesisResult(lfs.features.split_like(out), (), elapsed, info=info)


def npmix_synth(lfs: LabeledFeatureSet, k_neighbors: int, beta_range=(0.5, 1.5),
                rng: RandomSource | None = None, beta=None, chunk_elems: int = 1 << 22) -> SynthesisResult:
    """Nearest-neighbour expansion toward other classes (NP-Mix stand-in).

    For each ID row, ``k_neighbors`` candidate rows are drawn uniformly (with
    replacement) from the rows of *other* classes; the Euclidean-nearest
    candidate on the concatenated features becomes ``x_nn`` and the outlier is
    ``x + beta * (x_nn - x)`` with ``beta ~ U(beta_range)``. Values of beta
    above 1 extrapolate past the neighbour.
    """
    t0 = time.perf_counter()
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be at least 1")
    if rng is None:
        rng = RandomSource(0)
    gen = rng.generator
    sub = lfs.id_only() if lfs.is_ood.any() else lfs
    labels = sub.labels
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("npmix needs at least 2 ID classes")
    x = concat(sub.features)
    n, d = x.shape
    cand = np.empty((n, k_neighbors), dtype=np.int64)
    for c in classes:
        rows = np.flatnonzero(labels == c)
        pool = np.flatnonzero(labels != c)
        cand[rows] = pool[gen.integers(0, pool.size, size=(rows.size, k_neighbors))]
    nn = np.empty(n, dtype=np.int64)
    step = max(1, chunk_elems // max(1, k_neighbors * d))
    for s in range(0, n, step):
        e = min(n, s + step)
        diff = x[cand[s:e]] - x[s:e, None, :]
        dist = np.einsum("ijk,ijk->ij", diff, diff)
        nn[s:e] = cand[np.arange(s, e), dist.argmin(axis=1)]
    if beta is None:
        lo, hi = beta_range
        beta = gen.uniform(lo, hi, size=n)
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (n,))[:, None]
    out = x + beta * (x[nn] - x)
    elapsed = time.perf_counter() - t0

    def pullback(grads):
        g = np.concatenate([np.asarray(b) for b in grads], axis=1)
        gx = (1.0 - beta) * g
        np.add.at(gx, nn, beta * g)
        return list(sub.features.split_like(gx).blocks)

    return SynthesisResult(sub.features.split_like(out), (), elapsed,
                           info={"neighbors": nn, "beta": beta[:, 0].copy()},
                           pullback=pullback)
