"""End-to-end acceptance gates, one test per criterion.

Each test prints a single PASS/FAIL line with the measured numbers. Expected
values and tolerances are fixed here; none are tuned to the results.
"""
import itertools
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import central_diff, max_rel_err
from featmix.bench import BenchSettings, run_bench
from featmix.config import RunConfig
from featmix.core import ModalitySet, RandomSource
from featmix.datagen import generate
from featmix.experiment import evaluate, mean_metrics, train_and_eval
from featmix.losses import (
    CombinedLossConfig,
    a2d_loss,
    combined_loss,
    cross_entropy,
    entropy_max_loss,
    focal_loss,
    lovasz_class_terms,
    lovasz_softmax,
    xmuda_loss,
)
from featmix.metrics import brute_force_auroc, compute_ood_metrics
from featmix.model import TrainConfig, TwoStreamNet, train_step
from featmix.synth import MixingConfig
from featmix.theory import TwoModalGaussian, verify_theorem1, verify_theorem2

pytestmark = pytest.mark.slow


def test_c1_bounded_deviation(acceptance):
    t0 = time.perf_counter()
    combos = [(d, n) for d in (8, 64) for n in (1, d // 4, d // 2)]
    per_combo = -(-10_000 // len(combos))
    root = RandomSource(101)
    violations, worst, calls = 0, 0.0, 0
    for d, n in combos:
        x = root.child(f"data-{d}").generator.standard_normal((16, 2 * d)) * 3.0
        ms = ModalitySet([x[:, :d], x[:, d:]])
        rep = verify_theorem2(ms, MixingConfig(n, per_sample_masks=True, rng=root.child(f"mix-{d}-{n}")), per_combo)
        violations += rep.bound_violations
        worst = max(worst, rep.max_bound_ratio)
        calls += per_combo
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and calls >= 10_000 and elapsed < 10
    acceptance(1, ok, f"{calls} mixes, {violations} violations, max |Fo-F|/bound {worst:.3f}, {elapsed:.1f} s (< 10 s)")
    assert ok


@pytest.fixture(scope="module")
def theorem1_report():
    t0 = time.perf_counter()
    gen = TwoModalGaussian.isotropic(32, 2.0)
    rep = verify_theorem1(gen, MixingConfig(8, rng=RandomSource(202)), 100_000, exact_moments=True)
    return rep, time.perf_counter() - t0


def test_c2_low_likelihood(acceptance, theorem1_report):
    rep, elapsed = theorem1_report
    d2 = 64
    id_ok = abs(rep.mean_d2_id - d2) <= 3 * rep.se_d2_id
    out_ok = rep.mean_d2_outlier - d2 >= rep.shift_quadratic - 3 * rep.se_d2_outlier
    ll_ok = rep.mean_loglik_outlier < rep.mean_loglik_id
    ok = id_ok and out_ok and ll_ok and elapsed < 60
    acceptance(2, ok, f"ID D2 {rep.mean_d2_id:.3f} (2d=64, 3SE={3 * rep.se_d2_id:.3f}); outlier D2 "
                      f"{rep.mean_d2_outlier:.3f} vs required {d2 + rep.shift_quadratic - 3 * rep.se_d2_outlier:.3f}; "
                      f"loglik {rep.mean_loglik_outlier:.2f} < {rep.mean_loglik_id:.2f}; {elapsed:.1f} s (< 60 s)")
    assert ok


def test_c3_mean_shift(acceptance, theorem1_report):
    rep, _ = theorem1_report
    expected = (8 / 32) * np.r_[np.full(32, 2.0), np.full(32, -2.0)]
    np.testing.assert_array_equal(rep.predicted_mean_shift, expected)
    z = np.abs(rep.empirical_mean_shift - expected) / rep.se_mean_shift
    ok = bool(np.all(z <= 3.0)) and rep.n_trials == 100_000
    signed = (rep.empirical_mean_shift - expected) / rep.se_mean_shift
    acceptance(3, ok, f"64 coordinates, max |empirical - predicted| = {z.max():.2f} SE (limit 3), "
                      f"{int(np.sum(z > 3))} over; z mean {signed.mean():+.3f}, sd {signed.std():.3f}")
    assert ok


def _worst(f, arrays, grads):
    return max(max_rel_err(g, central_diff(f, x)) for x, g in zip(arrays, grads))


def test_c4_gradients(acceptance):
    worst = {}
    for seed in range(20):
        gen = RandomSource(400 + seed).generator
        z, zc, zl, zo = gen.standard_normal((4, 6, 4)) * 2.0
        y = gen.integers(0, 4, 6)
        cases = {
            "ce": (lambda: cross_entropy(z, y), [z], lambda v: [v.grad]),
            "focal": (lambda: focal_loss(z, y, gen_alpha, 2.0), [z], lambda v: [v.grad]),
            "lovasz": (lambda: lovasz_softmax(z, y), [z], lambda v: [v.grad]),
            "entropy": (lambda: entropy_max_loss(z), [z], lambda v: [v.grad]),
            "a2d": (lambda: a2d_loss(zc, zl, y), [zc, zl], lambda v: list(v.grad)),
            "xmuda": (lambda: xmuda_loss(zc, zl, z), [zc, zl, z], lambda v: list(v.grad)),
        }
        gen_alpha = gen.uniform(0.5, 2.0, 4)
        for name, (f, xs, gget) in cases.items():
            err = _worst(lambda: f().value, xs, gget(f()))
            worst[name] = max(worst.get(name, 0.0), err)

        cfg = CombinedLossConfig(gamma1=3.0, mode="segmentation", cross_modal="a2d")

        def comb():
            parts = {"focal": focal_loss(z, y), "lovasz": lovasz_softmax(z, y), "ent": entropy_max_loss(zo),
                     "a2d": a2d_loss(zc, zl, y)}
            return combined_loss(parts, cfg)

        g = comb().grad
        worst["combined"] = max(worst.get("combined", 0.0), _worst(
            lambda: comb().value, [z, zo, zc, zl], [g["fused"], g["outlier"], g["modal_c"], g["modal_l"]]))

        # whole network: classification, feature mixing outlier branch and modal heads
        net = TwoStreamNet((4, 3), (6, 4), 3, 5, True, rng=RandomSource(seed))
        bias = RandomSource(seed).child("bias").generator
        for k in net.params:
            if k.endswith(".b"):
                net.params[k] = bias.uniform(0.05, 0.3, net.params[k].shape) * bias.choice([-1, 1], net.params[k].shape)
        from featmix.core import LabeledFeatureSet
        ms = ModalitySet([gen.standard_normal((10, 4)), gen.standard_normal((10, 3))])
        batch = LabeledFeatureSet(ms, np.arange(10) % 3, np.zeros(10, bool), 3)
        tc = TrainConfig(synth_method="feature_mixing", mixing=MixingConfig(2),
                         loss=CombinedLossConfig(gamma1=3.0, cross_modal="xmuda"))
        grads, _ = train_step(net, batch, tc, RandomSource(seed))
        loss = lambda: train_step(net, batch, tc, RandomSource(seed))[1][0]  # noqa: E731
        worst["network"] = max(worst.get("network", 0.0), max(
            max_rel_err(grads[n], central_diff(loss, net.params[n])) for n in net.param_names()))
    ok = all(v < 1e-4 for v in worst.values())
    acceptance(4, ok, "20 instances each, worst rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_c5_metric_oracle(acceptance):
    gen = RandomSource(505).generator
    worst, invariant = 0.0, True
    for _ in range(1000):
        n = int(gen.integers(2, 201))
        s = np.round(gen.standard_normal(n), int(gen.integers(0, 4)))
        o = gen.random(n) < 0.4
        o[0], o[1] = True, False
        a = compute_ood_metrics(s, o).auroc
        worst = max(worst, abs(a - brute_force_auroc(s, o)))
        # strictly increasing maps that are exact on this grid of values
        for t in (s * 4.0, s * 0.5 - 3.0, np.arctan(s)):
            same_order = np.array_equal(np.sign(np.subtract.outer(t, t)), np.sign(np.subtract.outer(s, s)))
            if same_order and compute_ood_metrics(t, o).auroc != a:
                invariant = False
    ok = worst <= 1e-12 and invariant
    acceptance(5, ok, f"1000 instances, max |auroc - brute force| = {worst:.1e}; monotone invariance exact: {invariant}")
    assert ok


def test_c6_lovasz_vertices(acceptance):
    worst, cases = 0.0, 0
    for n in (1, 2, 3):
        for c in (2, 3):
            for preds in itertools.product(range(c), repeat=n):
                probs = np.eye(c)[list(preds)]
                for labels in itertools.product(range(c), repeat=n):
                    terms, _, _ = lovasz_class_terms(probs, labels)
                    p, g = np.array(preds), np.array(labels)
                    for k in range(c):
                        union = np.sum((p == k) | (g == k))
                        jac = np.sum((p == k) & (g == k)) / union if union else 1.0
                        worst = max(worst, abs(terms[k] - (1.0 - jac)))
                        cases += 1
    ok = worst <= 1e-10
    acceptance(6, ok, f"{cases} class terms over all hard predictions with n <= 3, C <= 3; max error {worst:.1e}")
    assert ok


def _score_table(rc, seeds, synth):
    """Per-seed metrics under every score; MaxLogit is the gated one."""
    out = {m: [] for m in ("maxlogit", "msp", "energy", "entropy", "gen")}
    for s in seeds:
        r = train_and_eval(rc, seed=s, synth=synth)
        test = generate(rc.generator_spec(s))["test"]
        for m in out:
            out[m].append(evaluate(r.net, test, method=m)[0])
    return out


def test_c7_confidence_separation(acceptance):
    t0 = time.perf_counter()
    rc = RunConfig("compare")
    seeds = range(5)
    base = _score_table(rc, seeds, "none")
    fm = _score_table(rc, seeds, "feature_mixing")
    elapsed = time.perf_counter() - t0
    b, f = mean_metrics(base["maxlogit"]), mean_metrics(fm["maxlogit"])
    d_fpr = b["fpr_at_95"] - f["fpr_at_95"]
    d_auc = f["auroc"] - b["auroc"]
    d_acc = b["id_accuracy"] - f["id_accuracy"]
    ok = d_fpr >= 0.05 and d_auc >= 0.02 and d_acc <= 0.02 and elapsed < 300
    diag = "; ".join(
        f"{m} dFPR {mean_metrics(base[m])['fpr_at_95'] - mean_metrics(fm[m])['fpr_at_95']:+.3f} "
        f"dAUROC {mean_metrics(fm[m])['auroc'] - mean_metrics(base[m])['auroc']:+.3f}"
        for m in ("msp", "energy", "entropy", "gen"))
    acceptance(7, ok, f"MaxLogit over 5 seeds: FPR@95 {b['fpr_at_95']:.3f} -> {f['fpr_at_95']:.3f} "
                      f"(need -0.05), AUROC {b['auroc']:.3f} -> {f['auroc']:.3f} (need +0.02), ID acc "
                      f"{b['id_accuracy']:.3f} -> {f['id_accuracy']:.3f} (max drop 0.02), {elapsed:.0f} s. "
                      f"Other scores: {diag}")
    assert ok


def test_c8_synthesis_speed(acceptance):
    t0 = time.perf_counter()
    s = BenchSettings()
    det = {r.method: r for r in run_bench(["feature_mixing", "npmix"], "detection", 5, s)}
    seg = {r.method: r for r in run_bench(["feature_mixing", "mixup", "npmix"], "segmentation", 5, s)}
    elapsed = time.perf_counter() - t0
    med = lambda t, m: t[m].median_seconds if t[m].status == "ok" else float("nan")  # noqa: E731
    det_ratio = med(det, "npmix") / med(det, "feature_mixing")
    seg_ratio = med(seg, "npmix") / med(seg, "feature_mixing")
    mix_ratio = med(seg, "feature_mixing") / med(seg, "mixup")
    ok = det_ratio >= 10 and seg_ratio >= 10 and mix_ratio <= 2 and elapsed < 120
    acceptance(8, ok, f"NP-Mix/FM {det_ratio:.1f}x at 2048x4352 and {seg_ratio:.1f}x at 90112x48 (need >= 10); "
                      f"FM/Mixup {mix_ratio:.2f} at 90112x48 (need <= 2); {elapsed:.0f} s (< 120 s)")
    assert ok


def test_c9_n_sweep(acceptance):
    rc = RunConfig("sweep-n")
    seeds = range(3)
    base = mean_metrics([train_and_eval(rc, seed=s, synth="none").metrics for s in seeds])["auroc"]
    rows, ok = [], True
    for n in (2, 4, 8, 16):
        auc = mean_metrics([train_and_eval(rc, seed=s, synth="feature_mixing", n_swap=n).metrics
                            for s in seeds])["auroc"]
        rows.append(f"N={n} {auc:.3f}")
        ok &= auc >= base - 0.005
    acceptance(9, ok, f"baseline AUROC {base:.3f}, floor {base - 0.005:.3f}; " + ", ".join(rows))
    assert ok


def test_c10_replay(acceptance, tmp_path):
    def cli(*args):
        cmd = [sys.executable, "-m", "featmix.cli", *map(str, args)]
        return subprocess.run(cmd, capture_output=True, text=True).returncode

    a, b = tmp_path / "a", tmp_path / "b"
    codes = [
        cli("gen", "--out", a / "gen", "--seed", "7"),
        cli("train", "--out", a / "train", "--seed", "7", "--synth", "feature_mixing", "--steps", "600"),
        cli("eval", "--out", a / "eval", "--model", a / "train" / "model.fmn", "--data", a / "gen" / "test.fmd"),
    ]
    for step in ("gen", "train", "eval"):
        codes.append(cli(step, "--out", b / step, "--config", a / step / "config.resolved"))
    files = ["gen/train.fmd", "gen/test.fmd", "train/model.fmn", "train/train_log.csv",
             "eval/metrics.json", "eval/metrics.csv", "eval/scores.csv"]
    same = [(a / f).read_bytes() == (b / f).read_bytes() for f in files if (a / f).exists() and (b / f).exists()]
    ok = codes == [0] * 6 and len(same) == len(files) and all(same)
    acceptance(10, ok, f"exit codes {codes}; {sum(same)}/{len(files)} replayed files byte-identical")
    assert ok
