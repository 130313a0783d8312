"""Synthetic multimodal Gaussian-cluster datasets with held-out OOD classes.

Every class (ID or OOD) gets one mean per modality, drawn from
``N(0, class_mean_scale^2 I)``; modality ``k >= 1`` is additionally shifted by
``modality_mean_offset``. Samples are i.i.d. ``N(mean, within_class_std^2 I)``.
OOD means come from the same distribution as ID means, so OOD classes differ
by being unseen rather than by being far away.
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LabeledFeatureSet, ModalitySet, RandomSource


@dataclass(frozen=True)
class GeneratorSpec:
    n_id_classes: int = 6
    n_ood_classes: int = 2
    dim_per_modality: tuple = (32, 32)
    class_mean_scale: float = 0.5
    within_class_std: float = 1.0
    #: scalar, or one value per dimension of the shifted modalities
    modality_mean_offset: float | tuple = 3.0
    samples_per_class: int = 500
    test_samples_per_class: int | None = None
    seed: int = 0
    #: class index (in generation order) of each class playing OOD; defaults to the last n_ood_classes
    ood_classes: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "dim_per_modality", tuple(int(d) for d in self.dim_per_modality))
        if self.n_id_classes < 2:
            raise ValueError("need at least 2 ID classes")
        if self.n_ood_classes < 0:
            raise ValueError("n_ood_classes must be non-negative")
        if not self.dim_per_modality or min(self.dim_per_modality) < 1:
            raise ValueError("every modality needs at least one dimension")
        if not self.within_class_std > 0:
            raise ValueError("within_class_std must be positive")
        off = self.modality_mean_offset
        if not np.isscalar(off):
            off = tuple(float(v) for v in off)
            if len(self.dim_per_modality) > 1 and len(off) not in (1,) + self.dim_per_modality[1:]:
                raise ValueError("vector modality_mean_offset must match the shifted modality width")
            object.__setattr__(self, "modality_mean_offset", off)
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.ood_classes is not None:
            ood = tuple(sorted(int(c) for c in self.ood_classes))
            if len(set(ood)) != self.n_ood_classes or any(not 0 <= c < self.n_classes for c in ood):
                raise ValueError("ood_classes must list n_ood_classes distinct class indices")
            object.__setattr__(self, "ood_classes", ood)

    @property
    def n_classes(self) -> int:
        return self.n_id_classes + self.n_ood_classes

    @property
    def ood_set(self) -> tuple:
        if self.ood_classes is not None:
            return self.ood_classes
        return tuple(range(self.n_id_classes, self.n_classes))

    @property
    def id_set(self) -> tuple:
        ood = set(self.ood_set)
        return tuple(c for c in range(self.n_classes) if c not in ood)


def split_roles(spec: GeneratorSpec, role_map) -> GeneratorSpec:
    """Re-assign which generated classes play ID and which play OOD.

    ``role_map`` maps every class index to ``"id"`` or ``"ood"`` (a sequence
    indexed by class works too). Class means are unchanged, since they are
    drawn per generation index.
    """
    if isinstance(role_map, dict):
        roles = [role_map[c] for c in range(spec.n_classes)]
    else:
        roles = list(role_map)
    if len(roles) != spec.n_classes or any(r not in ("id", "ood") for r in roles):
        raise ValueError(f"role_map must assign 'id' or 'ood' to all {spec.n_classes} classes")
    ood = tuple(c for c, r in enumerate(roles) if r == "ood")
    n_id = spec.n_classes - len(ood)
    if n_id < 2:
        raise ValueError("at least 2 classes must remain ID")
    return dataclasses.replace(spec, n_id_classes=n_id, n_ood_classes=len(ood), ood_classes=ood)


def class_means(spec: GeneratorSpec) -> list[np.ndarray]:
    """Per-modality ``[n_classes, dim]`` mean arrays in generation order."""
    rng = RandomSource(spec.seed).child("means")
    means = []
    for k, d in enumerate(spec.dim_per_modality):
        m = rng.generator.standard_normal((spec.n_classes, d)) * spec.class_mean_scale
        if k >= 1:
            m = m + np.asarray(spec.modality_mean_offset, dtype=np.float64)
        means.append(m)
    return means


def _draw(spec, means, classes, per_class, rng: RandomSource):
    blocks = [[] for _ in means]
    gen_idx = []
    for c in classes:
        gen_idx.append(np.full(per_class, c))
        for k, m in enumerate(means):
            noise = rng.generator.standard_normal((per_class, m.shape[1]))
            blocks[k].append(m[c] + spec.within_class_std * noise)
    return [np.concatenate(b) for b in blocks], np.concatenate(gen_idx)


def generate(spec: GeneratorSpec) -> dict:
    """Return ``{"train": ..., "test": ...}`` labeled sets.

    ID classes are relabeled ``0..n_id-1`` in generation order; OOD rows get
    the sentinel label ``n_id``. Train holds ID rows only; test holds fresh ID
    rows and OOD rows.
    """
    means = class_means(spec)
    id_set, ood_set = spec.id_set, spec.ood_set
    relabel = {c: i for i, c in enumerate(id_set)}
    names = tuple(f"m{k}" for k in range(len(means)))
    root = RandomSource(spec.seed)

    blocks, gidx = _draw(spec, means, id_set, spec.samples_per_class, root.child("train"))
    labels = np.array([relabel[c] for c in gidx], dtype=np.int64)
    train = LabeledFeatureSet(ModalitySet(blocks, names), labels, np.zeros(labels.size, bool), len(id_set))

    n_test = spec.test_samples_per_class or spec.samples_per_class
    blocks, gidx = _draw(spec, means, id_set + ood_set, n_test, root.child("test"))
    is_ood = np.isin(gidx, ood_set)
    labels = np.array([relabel.get(c, len(id_set)) for c in gidx], dtype=np.int64)
    test = LabeledFeatureSet(ModalitySet(blocks, names), labels, is_ood, len(id_set))
    return {"train": train, "test": test}


DATA_MAGIC = b"FMIXDATA"
DATA_VERSION = 1


def save_dataset(lfs: LabeledFeatureSet, path):
    """Write the binary dataset format described in docs/formats.md."""
    ms = lfs.features
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<IIIII", DATA_VERSION, ms.n_rows, len(ms), lfs.n_classes, 0))
        fh.write(struct.pack(f"<{len(ms)}I", *ms.widths))
        for b in ms.blocks:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        fh.write(lfs.labels.astype("<i4").tobytes())
        fh.write(lfs.is_ood.astype(np.uint8).tobytes())


def load_dataset(path) -> LabeledFeatureSet:
    data = Path(path).read_bytes()
    if data[:8] != DATA_MAGIC:
        raise ValueError(f"{path}: not a featmix dataset file")
    version, n, k, n_classes, _ = struct.unpack_from("<IIIII", data, 8)
    if version != DATA_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 28
    widths = struct.unpack_from(f"<{k}I", data, off)
    off += 4 * k
    expected = off + 8 * n * sum(widths) + 5 * n
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    blocks = []
    for w in widths:
        blocks.append(np.frombuffer(data, "<f8", n * w, off).reshape(n, w).astype(np.float64))
        off += 8 * n * w
    labels = np.frombuffer(data, "<i4", n, off).astype(np.int64)
    off += 4 * n
    is_ood = np.frombuffer(data, np.uint8, n, off).astype(bool)
    names = tuple(f"m{i}" for i in range(k))
    return LabeledFeatureSet(ModalitySet(blocks, names), labels, is_ood, n_classes)


def save_dataset_csv(lfs: LabeledFeatureSet, path):
    """Human-readable CSV: one column per feature (``m<k>_<j>``), then label, is_ood."""
    ms = lfs.features
    header = [f"{name}_{j}" for name, w in zip(ms.names, ms.widths) for j in range(w)]
    x = np.concatenate(ms.blocks, axis=1)
    with open(path, "w") as fh:
        fh.write(",".join(header + ["label", "is_ood"]) + "\n")
        for row, y, o in zip(x, lfs.labels, lfs.is_ood):
            fh.write(",".join(repr(float(v)) for v in row) + f",{y},{int(o)}\n")
