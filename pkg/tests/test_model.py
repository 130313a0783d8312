import dataclasses

import numpy as np
import pytest

from conftest import central_diff, max_rel_err
from featmix.core import DimensionError, LabeledFeatureSet, ModalitySet, RandomSource
from featmix.datagen import GeneratorSpec, generate
from featmix.losses import CombinedLossConfig
from featmix.metrics import id_accuracy
from featmix.model import (
    StaleCacheError,
    TrainConfig,
    TwoStreamNet,
    backward,
    forward,
    load_model,
    predict_logits,
    save_model,
    train,
    train_step,
)
from featmix.synth import MixingConfig


def _inputs(gen, n=5, widths=(4, 3)):
    return ModalitySet([gen.standard_normal((n, w)) for w in widths])


def _net(seed, head_hidden=5, modal_heads=True, widths=(4, 3)):
    net = TwoStreamNet(widths, (6, 4), 3, head_hidden, modal_heads, rng=RandomSource(seed))
    # nonzero biases keep pre-activations off the ReLU kink even for rows a layer zeroes out
    gen = RandomSource(seed).child("bias").generator
    for k in net.params:
        if k.endswith(".b"):
            net.params[k] = gen.uniform(0.05, 0.3, net.params[k].shape) * gen.choice([-1, 1], net.params[k].shape)
    return net


# -- forward ----------------------------------------------------------------

def test_zero_net_gives_zero_logits(rng):
    net = TwoStreamNet((4, 3), (6, 4), 3, head_hidden=5, zero=True)
    z = predict_logits(net, _inputs(rng.generator))
    assert np.all(z == 0)


def test_doubling_linear_head_doubles_logits(rng):
    net = _net(1, head_hidden=0, modal_heads=False)
    ms = _inputs(rng.generator)
    z = predict_logits(net, ms)
    net.params["head.out.W"] *= 2
    net.params["head.out.b"] *= 2
    np.testing.assert_allclose(predict_logits(net, ms), 2 * z, rtol=1e-14)


def test_forward_deterministic(rng):
    net, ms = _net(2), _inputs(rng.generator)
    a, b = forward(net, ms), forward(net, ms)
    assert np.array_equal(a.fused_logits, b.fused_logits)
    assert all(np.array_equal(x, y) for x, y in zip(a.modal_logits, b.modal_logits))


def test_forward_width_mismatch(rng):
    with pytest.raises(DimensionError):
        forward(_net(0), _inputs(rng.generator, widths=(4, 2)))


def test_hidden_must_have_two_layers():
    with pytest.raises(ValueError):
        TwoStreamNet((2, 2), (4,), 2)


# -- backward ---------------------------------------------------------------

def test_zero_upstream_gives_zero_grads(rng):
    net, ms = _net(3), _inputs(rng.generator)
    f = forward(net, ms)
    g = backward(net, f.cache, np.zeros_like(f.fused_logits))
    assert set(g) == set(net.param_names())
    assert all(np.all(v == 0) for v in g.values())


def test_stale_cache_raises(rng):
    net, ms = _net(3), _inputs(rng.generator)
    f = forward(net, ms)
    net.apply_update({}, 0.1)
    with pytest.raises(StaleCacheError):
        backward(net, f.cache, np.ones_like(f.fused_logits))


@pytest.mark.parametrize("head_hidden", [0, 5])
def test_backward_matches_finite_differences(head_hidden):
    """Linear functional of all outputs, including gradients injected at the stream features."""
    for seed in range(20):
        gen = RandomSource(100 + seed).generator
        net = _net(seed, head_hidden)
        ms = _inputs(gen)
        r = gen.standard_normal((5, 3))
        rm = gen.standard_normal((2, 5, 3))
        rf = [gen.standard_normal((5, 4)) for _ in range(2)]

        def objective():
            f = forward(net, ms)
            val = np.sum(r * f.fused_logits) + sum(np.sum(a * b) for a, b in zip(rm, f.modal_logits))
            return val + sum(np.sum(a * b) for a, b in zip(rf, f.stream_feats.blocks))

        f = forward(net, ms)
        g = backward(net, f.cache, r, list(rm), rf)
        for name in net.param_names():
            num = central_diff(objective, net.params[name])
            assert max_rel_err(g[name], num) < 1e-4, name


def test_batch_gradient_is_sum_of_row_gradients(rng):
    net, ms = _net(4), _inputs(rng.generator, n=6)
    r = rng.generator.standard_normal((6, 3))
    full = backward(net, forward(net, ms).cache, r)
    acc = {k: np.zeros_like(v) for k, v in full.items()}
    for i in range(6):
        gi = backward(net, forward(net, ms.rows([i])).cache, r[i:i + 1])
        for k in acc:
            acc[k] += gi[k]
    for k in full:
        np.testing.assert_allclose(full[k], acc[k], atol=1e-12)


def _train_set(gen, n=12, widths=(4, 3), n_classes=3):
    ms = _inputs(gen, n, widths)
    y = np.arange(n) % n_classes
    return LabeledFeatureSet(ms, y, np.zeros(n, bool), n_classes)


@pytest.mark.parametrize("synth,mode,cross", [
    ("feature_mixing", "detection", "none"),
    ("feature_mixing", "segmentation", "a2d"),
    ("mixup", "detection", "xmuda"),
    ("none", "detection", "none"),
])
def test_train_step_gradient(synth, mode, cross):
    """The whole objective, outlier branch included, against central differences."""
    for seed in range(20):
        gen = RandomSource(500 + seed).generator
        net = _net(seed, 5, modal_heads=cross != "none")
        batch = _train_set(gen)
        cfg = TrainConfig(synth_method=synth, mixing=MixingConfig(2),
                          loss=CombinedLossConfig(gamma1=3.0 if synth != "none" else 0.0,
                                                  mode=mode, cross_modal=cross))
        grads, _ = train_step(net, batch, cfg, RandomSource(seed))
        loss = lambda: train_step(net, batch, cfg, RandomSource(seed))[1][0]  # noqa: E731
        for name in net.param_names():
            assert max_rel_err(grads[name], central_diff(loss, net.params[name])) < 1e-4, name


# -- training ---------------------------------------------------------------

def _small_data(seed=0):
    spec = GeneratorSpec(n_id_classes=3, n_ood_classes=1, dim_per_modality=(8, 8), samples_per_class=60, seed=seed)
    return generate(spec)


def test_gamma_zero_trace_is_plain_training():
    tr = _small_data()["train"]
    base = TrainConfig(steps=50, batch_size=32, seed=3)
    off = dataclasses.replace(base, synth_method="feature_mixing", mixing=MixingConfig(3), loss=CombinedLossConfig(gamma1=0.0))
    runs = []
    for cfg in (base, off):
        net = TwoStreamNet((8, 8), (8, 6), 3, rng=RandomSource(1))
        _, log = train(net, tr, cfg)
        runs.append((log.column("loss_total"), net))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert all(np.array_equal(runs[0][1].params[k], runs[1][1].params[k]) for k in runs[0][1].params)


def test_training_reproducible():
    tr = _small_data()["train"]
    cfg = TrainConfig(steps=40, batch_size=32, synth_method="feature_mixing", mixing=MixingConfig(3),
                      loss=CombinedLossConfig(gamma1=3.0))
    nets = [TwoStreamNet((8, 8), (8, 6), 3, 4, rng=RandomSource(1)) for _ in range(2)]
    logs = [train(n, tr, cfg)[1] for n in nets]
    assert logs[0].rows == logs[1].rows
    assert all(np.array_equal(nets[0].params[k], nets[1].params[k]) for k in nets[0].params)


def test_outlier_entropy_increases():
    tr = _small_data()["train"]
    cfg = TrainConfig(steps=300, batch_size=64, synth_method="feature_mixing", mixing=MixingConfig(4),
                      loss=CombinedLossConfig(gamma1=3.0))
    net = TwoStreamNet((8, 8), (16, 8), 3, 16, rng=RandomSource(2))
    _, log = train(net, tr, cfg)
    ent = -log.column("loss_ent")  # the logged term is the negated entropy
    assert ent[-1] > ent[0]
    assert ent[-20:].mean() > ent[:20].mean()


def test_warmup_steps_skip_outliers():
    tr = _small_data()["train"]
    cfg = TrainConfig(steps=30, batch_size=32, synth_method="feature_mixing", mixing=MixingConfig(3),
                      loss=CombinedLossConfig(gamma1=3.0), outlier_start_step=10)
    _, log = train(TwoStreamNet((8, 8), (8, 6), 3, rng=RandomSource(1)), tr, cfg)
    ent = log.column("loss_ent")
    assert np.all(ent[:10] == 0) and np.all(ent[10:] < 0)


@pytest.mark.parametrize("synth", ["mixup", "npmix", "vos"])
def test_baseline_synthesizers_train(synth):
    tr = _small_data()["train"]
    cfg = TrainConfig(steps=30, batch_size=48, synth_method=synth, loss=CombinedLossConfig(gamma1=1.0),
                      vos_bank_size=40, vos_candidates=50, npmix_neighbors=4)
    net = TwoStreamNet((8, 8), (6, 4), 3, rng=RandomSource(1))
    _, log = train(net, tr, cfg)
    assert np.all(np.isfinite(log.column("loss_total")))
    if synth != "vos":
        assert np.all(log.column("loss_ent") < 0)


def test_separable_classes_reach_high_accuracy():
    spec = GeneratorSpec(n_id_classes=4, n_ood_classes=0, dim_per_modality=(8, 8), class_mean_scale=3.0,
                         within_class_std=1.0, samples_per_class=200, seed=5)
    tr = generate(spec)["train"]
    net = TwoStreamNet((8, 8), (32, 16), 4, rng=RandomSource(0))
    train(net, tr, TrainConfig(steps=2000, batch_size=64, step_size=0.05))
    assert id_accuracy(predict_logits(net, tr.features), tr.labels) >= 0.95


def test_train_rejects_ood_rows():
    test = _small_data()["test"]
    with pytest.raises(ValueError, match="OOD"):
        train(TwoStreamNet((8, 8), (4, 4), 3), test, TrainConfig(steps=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(step_size=0.0)
    with pytest.raises(ValueError):
        TrainConfig(synth_method="gan")


def test_cross_modal_needs_modal_heads(rng):
    cfg = TrainConfig(loss=CombinedLossConfig(cross_modal="a2d"))
    with pytest.raises(ValueError):
        train_step(_net(0, modal_heads=False), _train_set(rng.generator), cfg, rng)


# -- persistence ------------------------------------------------------------

@pytest.mark.parametrize("head_hidden,modal", [(0, False), (5, True)])
def test_model_roundtrip(tmp_path, head_hidden, modal):
    net = _net(9, head_hidden, modal)
    p = tmp_path / "m.fmn"
    save_model(net, p)
    back = load_model(p)
    assert back.header() == net.header()
    assert all(np.array_equal(back.params[k], net.params[k]) for k in net.param_names())
    save_model(back, tmp_path / "again.fmn")
    assert (tmp_path / "again.fmn").read_bytes() == p.read_bytes()


def test_model_load_rejects_corruption(tmp_path):
    p = tmp_path / "m.fmn"
    save_model(_net(1), p)
    raw = p.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-8])
    (tmp_path / "long").write_bytes(raw + b"\0" * 8)
    (tmp_path / "magic").write_bytes(b"X" + raw[1:])
    for name in ("short", "long", "magic"):
        with pytest.raises(ValueError):
            load_model(tmp_path / name)
