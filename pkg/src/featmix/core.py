"""Shared numeric types, seeded randomness and the modality data model.

Features are stored samples-as-rows: a ``FeatureMatrix`` is simply a finite
2-D ``float64`` numpy array, and a :class:`ModalitySet` is an ordered tuple of
such blocks sharing their row count.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FeatureMatrix = np.ndarray


class DimensionError(ValueError):
    """Raised when array shapes are inconsistent with each other."""


def as_feature_matrix(data, name: str = "features") -> FeatureMatrix:
    """Validate and return ``data`` as a finite 2-D float64 array.

    A 1-D input is treated as a single row.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must have at least one row and column, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ModalitySet:
    """Per-modality feature blocks with equal row counts.

    Parameters
    ----------
    blocks : sequence of array_like
        One ``[n_rows, width_k]`` matrix per modality, in concatenation order.
    names : sequence of str, optional
        Modality labels; defaults to ``m0, m1, ...``.
    """

    blocks: tuple[np.ndarray, ...]
    names: tuple[str, ...] = ()

    def __init__(self, blocks: Sequence, names: Sequence[str] | None = None):
        if len(blocks) < 1:
            raise DimensionError("a ModalitySet needs at least one block")
        arrs = tuple(as_feature_matrix(b, name=f"block {i}") for i, b in enumerate(blocks))
        rows = {a.shape[0] for a in arrs}
        if len(rows) != 1:
            raise DimensionError(f"blocks have mismatched row counts {[a.shape[0] for a in arrs]}")
        if names is None:
            names = tuple(f"m{i}" for i in range(len(arrs)))
        names = tuple(names)
        if len(names) != len(arrs):
            raise DimensionError("one name per block is required")
        object.__setattr__(self, "blocks", arrs)
        object.__setattr__(self, "names", names)

    @property
    def n_rows(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(b.shape[1] for b in self.blocks)

    @property
    def width(self) -> int:
        return sum(self.widths)

    def __len__(self) -> int:
        return len(self.blocks)

    def rows(self, index) -> "ModalitySet":
        """Row subset (any numpy index) of every block."""
        return ModalitySet([b[index] for b in self.blocks], self.names)

    def split_like(self, fm: np.ndarray) -> "ModalitySet":
        """Split a concatenated matrix back into blocks of this set's widths."""
        fm = np.asarray(fm, dtype=np.float64)
        if fm.ndim != 2 or fm.shape[1] != self.width:
            raise DimensionError(f"expected width {self.width}, got shape {fm.shape}")
        cuts = np.cumsum(self.widths)[:-1]
        return ModalitySet(np.split(fm, cuts, axis=1), self.names)


def concat(ms: ModalitySet) -> FeatureMatrix:
    """Concatenate modality blocks along the feature axis, preserving order."""
    if not isinstance(ms, ModalitySet):
        ms = ModalitySet(ms)
    if len(ms.blocks) == 1:
        return ms.blocks[0]
    return np.concatenate(ms.blocks, axis=1)


@dataclass(frozen=True)
class LabeledFeatureSet:
    """Features with integer labels and ID/OOD flags.

    OOD rows carry the sentinel label ``n_classes`` (one past the last ID
    class).
    """

    features: ModalitySet
    labels: np.ndarray
    is_ood: np.ndarray
    n_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        is_ood = np.asarray(self.is_ood, dtype=bool).reshape(-1)
        n = self.features.n_rows
        if labels.shape[0] != n or is_ood.shape[0] != n:
            raise DimensionError("labels and is_ood must have one entry per row")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        id_labels = labels[~is_ood]
        if id_labels.size and (id_labels.min() < 0 or id_labels.max() >= self.n_classes):
            raise ValueError(f"ID labels must lie in 0..{self.n_classes - 1}")
        if np.any(labels[is_ood] != self.n_classes):
            raise ValueError(f"OOD rows must carry the sentinel label {self.n_classes}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "is_ood", is_ood)

    @property
    def n_rows(self) -> int:
        return self.features.n_rows

    def rows(self, index) -> "LabeledFeatureSet":
        return LabeledFeatureSet(self.features.rows(index), self.labels[index],
                                 self.is_ood[index], self.n_classes)

    def id_only(self) -> "LabeledFeatureSet":
        return self.rows(np.flatnonzero(~self.is_ood))


def _derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class RandomSource:
    """Counter-based (Philox) random stream with labeled child derivation.

    ``child(label)`` returns an independent stream whose seed depends only on
    this source's seed and the label, so adding a new consumer never perturbs
    existing streams.
    """

    seed: int
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def child(self, label: str) -> "RandomSource":
        return RandomSource(_derive_seed(self.seed, label))

    def spawn(self, n: int, label: str = "worker") -> list["RandomSource"]:
        return [self.child(f"{label}:{i}") for i in range(n)]


def as_random_source(rng) -> RandomSource:
    if isinstance(rng, RandomSource):
        return rng
    if rng is None:
        return RandomSource(0)
    return RandomSource(int(rng))


def sample_index_subset(rng: RandomSource, range_size: int, n: int) -> np.ndarray:
    """Draw ``n`` distinct indices from ``range(range_size)`` in draw order.

    Same contract as ``random.sample(range(range_size), n)``: uniform over
    ordered selections without replacement.
    """
    if n < 0 or range_size < 0:
        raise ValueError("range_size and n must be non-negative")
    if n > range_size:
        raise ValueError(f"cannot sample {n} indices from a range of {range_size}")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    return rng.generator.choice(range_size, size=n, replace=False).astype(np.int64)
