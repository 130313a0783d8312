"""Train-then-evaluate runs on generated data, shared by the CLI and tests."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .core import LabeledFeatureSet
from .datagen import generate
from .metrics import MetricsReport, compute_ood_metrics, id_accuracy
from .model import TrainLog, TwoStreamNet, predict_logits, train
from .scores import score


@dataclass
class RunResult:
    net: TwoStreamNet
    log: TrainLog
    metrics: MetricsReport
    scores: np.ndarray
    is_ood: np.ndarray


def evaluate(net: TwoStreamNet, test: LabeledFeatureSet, method="maxlogit", temperature=1.0,
             gamma=0.1, top_m=None):
    """Score a labeled test set; accuracy is measured on its ID rows."""
    if test.n_rows == 0:
        raise ValueError("test set is empty")
    widths = test.features.widths
    if tuple(widths) != net.input_widths:
        raise ValueError(f"model expects modality widths {net.input_widths}, dataset has {tuple(widths)}")
    if test.n_classes != net.n_classes:
        raise ValueError(f"model predicts {net.n_classes} classes, dataset has {test.n_classes}")
    z = predict_logits(net, test.features)
    ids = ~test.is_ood
    acc = id_accuracy(z[ids], test.labels[ids]) if ids.any() else float("nan")
    s = score(z, method, temperature, gamma, top_m)
    return compute_ood_metrics(s, test.is_ood, acc), s


def train_and_eval(rc: RunConfig, seed: int | None = None, synth: str | None = None,
                   n_swap: int | None = None) -> RunResult:
    """Generate data for ``seed``, train one net and evaluate it on the test split."""
    seed = rc.seed if seed is None else seed
    data = generate(rc.generator_spec(seed))
    tr = data["train"]
    net = rc.build_net(tr.features.widths, tr.n_classes, seed)
    _, log = train(net, tr, rc.train_config(seed, synth, n_swap))
    metrics, s = evaluate(net, data["test"], **rc.score_kwargs())
    return RunResult(net, log, metrics, s, data["test"].is_ood)


def _metrics_job(args):
    rc, seed, synth, n_swap = args
    return train_and_eval(rc, seed, synth, n_swap).metrics


def run_grid(rc: RunConfig, jobs, parallel: int = 1) -> list[MetricsReport]:
    """Run ``(seed, synth, n_swap)`` jobs, in worker processes when ``parallel > 1``.

    Every job is self-seeded, so results do not depend on scheduling.
    """
    tasks = [(rc, s, m, n) for s, m, n in jobs]
    if parallel <= 1:
        return [_metrics_job(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(_metrics_job, tasks))


def mean_metrics(reports) -> dict:
    keys = ("fpr_at_95", "auroc", "aupr", "id_accuracy")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
