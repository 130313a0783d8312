"""Micro-benchmark of the outlier synthesizers on pre-generated feature batches.

Each method gets two discarded warm-up calls and then ``repeats`` timed
calls; only the synthesis call sits inside the timed region. VOS fits a
full-covariance Gaussian per class, which is impossible when a class has
fewer rows than dimensions, so it is reported as failed at wide shapes.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .core import LabeledFeatureSet, ModalitySet, RandomSource
from .synth import MixingConfig, feature_mixing, mixup_synth, npmix_synth, vos_synth

BENCH_METHODS = ("feature_mixing", "mixup", "vos", "npmix")

#: named shapes: (rows, per-modality widths)
SHAPES = {
    "detection": (2048, (2176, 2176)),
    "segmentation": (90112, (24, 24)),
}


@dataclass(frozen=True)
class BenchSettings:
    n_classes: int = 10
    n_swap: int = 10
    mixup_alpha: float = 1.0
    npmix_neighbors: int = 32
    #: VOS runs at this candidate count; the cost is extrapolated to vos_reference_candidates
    vos_candidates: int = 1000
    vos_reference_candidates: int = 10000
    vos_keep_fraction: float = 0.01
    warmups: int = 2
    seed: int = 0


@dataclass
class BenchResult:
    method: str
    n_samples: int
    feature_dim: int
    median_seconds: float
    iqr_seconds: float
    n_repeats: int
    status: str = "ok"
    note: str = ""
    timings: list = field(default_factory=list)


def resolve_shape(shape) -> tuple[int, tuple[int, ...]]:
    """Accept a shape name, or ``(n_samples, widths)`` for a custom shape."""
    if isinstance(shape, str):
        if shape not in SHAPES:
            raise ValueError(f"unknown shape {shape!r}; choose from {sorted(SHAPES)} or pass (n, widths)")
        return SHAPES[shape]
    n, widths = shape
    widths = tuple(int(w) for w in widths)
    if int(n) < 2 or len(widths) != 2 or min(widths) < 1:
        raise ValueError("custom shape needs n >= 2 and two positive widths")
    return int(n), widths


def make_inputs(n: int, widths, n_classes: int, rng: RandomSource) -> LabeledFeatureSet:
    gen = rng.generator
    blocks = [gen.standard_normal((n, w)) for w in widths]
    labels = np.arange(n) % n_classes
    return LabeledFeatureSet(ModalitySet(blocks), labels, np.zeros(n, bool), n_classes)


def _runner(method: str, data: LabeledFeatureSet, s: BenchSettings, rng: RandomSource):
    ms = data.features
    if method == "feature_mixing":
        cfg = MixingConfig(min(s.n_swap, min(ms.widths)), rng=rng)
        return lambda: feature_mixing(ms, cfg)
    if method == "mixup":
        return lambda: mixup_synth(ms, s.mixup_alpha, rng)
    if method == "npmix":
        return lambda: npmix_synth(data, s.npmix_neighbors, rng=rng)
    if method == "vos":
        return lambda: vos_synth(data, s.vos_candidates, s.vos_keep_fraction, rng)
    raise ValueError(f"unknown bench method {method!r}; choose from {BENCH_METHODS}")


def run_bench(methods=BENCH_METHODS, shape="detection", repeats: int = 5,
              settings: BenchSettings | None = None) -> list[BenchResult]:
    """Time each method on one shared input batch; failures are recorded, not raised."""
    s = settings or BenchSettings()
    if repeats < 5:
        raise ValueError("repeats must be at least 5")
    n, widths = resolve_shape(shape)
    root = RandomSource(s.seed)
    data = make_inputs(n, widths, s.n_classes, root.child("inputs"))
    width = sum(widths)
    results = []
    for method in methods:
        try:
            fn = _runner(method, data, s, root.child(method))
            for _ in range(s.warmups):
                fn()
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                times.append(time.perf_counter() - t0)
        except (ValueError, MemoryError, np.linalg.LinAlgError) as exc:
            results.append(BenchResult(method, n, width, float("nan"), float("nan"), 0,
                                       status="failed", note=str(exc)))
            continue
        q1, med, q3 = np.percentile(times, [25, 50, 75])
        note = ""
        if method == "vos":
            scale = s.vos_reference_candidates / s.vos_candidates
            note = (f"{s.vos_candidates} candidates per class; about {med * scale:.3g} s "
                    f"extrapolated linearly to {s.vos_reference_candidates}")
        results.append(BenchResult(method, n, width, float(med), float(q3 - q1), repeats,
                                   note=note, timings=times))
    return results


def speedup_table(results) -> list[tuple[str, float]]:
    """``(method, median / FM median)`` for successful runs, largest ratio first."""
    base = [r for r in results if r.method == "feature_mixing" and r.status == "ok"]
    if not base:
        raise ValueError("speedup_table needs a successful feature_mixing result")
    fm = base[0].median_seconds
    rows = [(r.method, r.median_seconds / fm) for r in results if r.status == "ok"]
    return sorted(rows, key=lambda t: -t[1])


def results_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_samples", "feature_dim", "median_seconds", "iqr_seconds",
                "n_repeats", "status", "note"])
    for r in results:
        w.writerow([r.method, r.n_samples, r.feature_dim, repr(r.median_seconds),
                    repr(r.iqr_seconds), r.n_repeats, r.status, r.note])
    return buf.getvalue()


def format_table(results) -> str:
    lines = [f"{'method':<16}{'rows':>8}{'width':>7}{'median s':>12}{'iqr s':>11}  ratio"]
    ratios = {}
    try:
        ratios = dict(speedup_table(results))
    except ValueError:
        pass
    for r in results:
        if r.status != "ok":
            lines.append(f"{r.method:<16}{r.n_samples:>8}{r.feature_dim:>7}  failed: {r.note}")
            continue
        ratio = ratios.get(r.method)
        rtxt = f"{ratio:.1f}x" if ratio is not None else "-"
        lines.append(f"{r.method:<16}{r.n_samples:>8}{r.feature_dim:>7}"
                     f"{r.median_seconds:>12.4g}{r.iqr_seconds:>11.3g}  {rtxt}")
        if r.note:
            lines.append(f"    ({r.note})")
    return "\n".join(lines)
