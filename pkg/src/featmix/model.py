"""Two-stream late-fusion MLP with analytic backward pass, and its training loop.

Each modality has its own two-layer ReLU stream. The stream outputs
(penultimate features) are concatenated and passed to a fused head, and
optionally to one linear head per modality (needed by A2D / xMUDA).
Outliers are synthesized from the stream features of the current batch and
sent through the fused head only, where their prediction entropy is maximized.
"""
from __future__ import annotations

import csv
import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DimensionError, LabeledFeatureSet, ModalitySet, RandomSource, concat
from .losses import (
    CombinedLossConfig,
    LossValue,
    a2d_loss,
    combined_loss,
    cross_entropy,
    entropy_max_loss,
    focal_loss,
    lovasz_softmax,
    xmuda_loss,
)
from .synth import (
    MixingConfig,
    feature_mixing,
    feature_mixing_cyclic,
    feature_mixing_unimodal,
    mixup_synth,
    npmix_synth,
    vos_synth,
)

SYNTH_METHODS = ("none", "feature_mixing", "mixup", "vos", "npmix")


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from before the last parameter update."""


def _relu(x):
    return np.maximum(x, 0.0)


class TwoStreamNet:
    """Parameters of the two-stream network.

    Parameters
    ----------
    input_widths : sequence of int
        Input width per modality.
    hidden : (int, int)
        Widths of the two stream layers (shared by all streams).
    n_classes : int
    head_hidden : int
        Width of the fused head's hidden layer; 0 makes the head linear.
    modal_heads : bool
        Add a linear classifier on each stream's output.
    """

    def __init__(self, input_widths, hidden=(64, 32), n_classes=2, head_hidden=0,
                 modal_heads=False, rng: RandomSource | None = None, zero=False):
        self.input_widths = tuple(int(w) for w in input_widths)
        self.hidden = tuple(int(h) for h in hidden)
        if len(self.hidden) != 2:
            raise ValueError("each stream has exactly 2 hidden layers")
        self.n_classes = int(n_classes)
        self.head_hidden = int(head_hidden)
        self.modal_heads = bool(modal_heads)
        self.version = 0
        gen = (rng or RandomSource(0)).generator
        self.params: dict[str, np.ndarray] = {}
        for name, (n_in, n_out) in self.layer_shapes().items():
            if zero:
                w = np.zeros((n_in, n_out))
            else:
                w = gen.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
            self.params[name + ".W"] = w
            self.params[name + ".b"] = np.zeros(n_out)

    @property
    def feature_width(self) -> int:
        return self.hidden[1] * len(self.input_widths)

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """Layer name -> (fan_in, fan_out), in canonical (serialization) order."""
        shapes = {}
        for k, w in enumerate(self.input_widths):
            shapes[f"s{k}.l1"] = (w, self.hidden[0])
            shapes[f"s{k}.l2"] = (self.hidden[0], self.hidden[1])
        if self.head_hidden:
            shapes["head.l1"] = (self.feature_width, self.head_hidden)
            shapes["head.out"] = (self.head_hidden, self.n_classes)
        else:
            shapes["head.out"] = (self.feature_width, self.n_classes)
        if self.modal_heads:
            for k in range(len(self.input_widths)):
                shapes[f"m{k}.out"] = (self.hidden[1], self.n_classes)
        return shapes

    def param_names(self) -> list[str]:
        return [f"{layer}.{p}" for layer in self.layer_shapes() for p in ("W", "b")]

    def copy(self) -> "TwoStreamNet":
        other = object.__new__(TwoStreamNet)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def apply_update(self, grads: dict, step_size: float):
        for k, g in grads.items():
            self.params[k] -= step_size * g
        self.version += 1

    def header(self) -> list[int]:
        h = [len(self.input_widths)]
        for w in self.input_widths:
            h += [w, *self.hidden]
        return h + [self.head_hidden, self.n_classes, int(self.modal_heads)]


@dataclass
class ForwardResult:
    stream_feats: ModalitySet
    fused_logits: np.ndarray
    modal_logits: tuple | None
    cache: dict = field(repr=False)


def _linear(x, p, name):
    return x @ p[name + ".W"] + p[name + ".b"]


def head_forward(net: TwoStreamNet, feats: np.ndarray):
    """Fused head on concatenated stream features; returns (logits, cache)."""
    p = net.params
    if feats.shape[1] != net.feature_width:
        raise DimensionError(f"head expects width {net.feature_width}, got {feats.shape[1]}")
    cache = {"x": feats, "version": net.version}
    if net.head_hidden:
        z = _linear(feats, p, "head.l1")
        a = _relu(z)
        cache["z"], cache["a"] = z, a
        return _linear(a, p, "head.out"), cache
    return _linear(feats, p, "head.out"), cache


def head_backward(net: TwoStreamNet, cache, grad_logits):
    """Gradients of the fused head parameters and of its input features."""
    _check_version(net, cache)
    p = net.params
    grads = {}
    x = cache["a"] if net.head_hidden else cache["x"]
    grads["head.out.W"] = x.T @ grad_logits
    grads["head.out.b"] = grad_logits.sum(axis=0)
    gx = grad_logits @ p["head.out.W"].T
    if net.head_hidden:
        gz = gx * (cache["z"] > 0)
        grads["head.l1.W"] = cache["x"].T @ gz
        grads["head.l1.b"] = gz.sum(axis=0)
        gx = gz @ p["head.l1.W"].T
    return grads, gx


def _check_version(net, cache):
    if cache["version"] != net.version:
        raise StaleCacheError("cache was produced before the last parameter update")


def forward(net: TwoStreamNet, ms: ModalitySet) -> ForwardResult:
    if ms.widths != net.input_widths:
        raise DimensionError(f"input widths {ms.widths} do not match network {net.input_widths}")
    p = net.params
    stream_cache, feats = [], []
    for k, x in enumerate(ms.blocks):
        z1 = _linear(x, p, f"s{k}.l1")
        a1 = _relu(z1)
        z2 = _linear(a1, p, f"s{k}.l2")
        a2 = _relu(z2)
        stream_cache.append((x, z1, a1, z2))
        feats.append(a2)
    fused = np.concatenate(feats, axis=1)
    logits, hcache = head_forward(net, fused)
    modal = None
    if net.modal_heads:
        modal = tuple(_linear(f, p, f"m{k}.out") for k, f in enumerate(feats))
    cache = {"streams": stream_cache, "feats": feats, "head": hcache, "version": net.version}
    return ForwardResult(ModalitySet(feats, ms.names), logits, modal, cache)


def backward(net: TwoStreamNet, cache, grad_logits, grad_modal=None, grad_feats=None) -> dict:
    """Parameter gradients given upstream gradients.

    ``grad_logits`` is w.r.t. the fused logits; ``grad_modal`` optionally holds
    one gradient per modality head; ``grad_feats`` optionally adds gradients
    arriving directly at each stream's output features (e.g. from the
    outlier branch).
    """
    _check_version(net, cache)
    p = net.params
    grads, gfused = head_backward(net, cache["head"], grad_logits)
    widths = [f.shape[1] for f in cache["feats"]]
    gfeats = np.split(gfused, np.cumsum(widths)[:-1], axis=1)
    for k, f in enumerate(cache["feats"]):
        name = f"m{k}.out"
        if net.modal_heads:
            gm = grad_modal[k] if grad_modal is not None and grad_modal[k] is not None else np.zeros((f.shape[0], net.n_classes))
            grads[name + ".W"] = f.T @ gm
            grads[name + ".b"] = gm.sum(axis=0)
            gfeats[k] = gfeats[k] + gm @ p[name + ".W"].T
        if grad_feats is not None and grad_feats[k] is not None:
            gfeats[k] = gfeats[k] + grad_feats[k]
    for k, (x, z1, a1, z2) in enumerate(cache["streams"]):
        gz2 = gfeats[k] * (z2 > 0)
        grads[f"s{k}.l2.W"] = a1.T @ gz2
        grads[f"s{k}.l2.b"] = gz2.sum(axis=0)
        gz1 = (gz2 @ p[f"s{k}.l2.W"].T) * (z1 > 0)
        grads[f"s{k}.l1.W"] = x.T @ gz1
        grads[f"s{k}.l1.b"] = gz1.sum(axis=0)
    return grads


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 128
    step_size: float = 0.05
    synth_method: str = "none"
    mixing: MixingConfig = field(default_factory=lambda: MixingConfig(10))
    loss: CombinedLossConfig = field(default_factory=lambda: CombinedLossConfig(gamma1=0.0))
    seed: int = 0
    focal_lambda: float = 2.0
    mixup_alpha: float = 1.0
    vos_candidates: int = 1000
    vos_keep_fraction: float = 0.01
    vos_bank_size: int = 256
    npmix_neighbors: int = 8
    npmix_beta: tuple = (0.5, 1.5)
    #: steps of plain ID training before the outlier branch switches on
    outlier_start_step: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.synth_method not in SYNTH_METHODS:
            raise ValueError(f"synth_method must be one of {SYNTH_METHODS}")


LOG_COLUMNS = ("step", "loss_total", "loss_cls", "loss_ent", "loss_xmodal")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        i = LOG_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


class _FeatureBank:
    """Most recent stream features per class, for class-conditional fitting."""

    def __init__(self, n_classes: int, size: int):
        self.size = size
        self.store = [np.empty((0, 0)) for _ in range(n_classes)]

    def push(self, feats: np.ndarray, labels: np.ndarray):
        for c in range(len(self.store)):
            new = feats[labels == c]
            if new.size:
                old = self.store[c] if self.store[c].size else np.empty((0, feats.shape[1]))
                self.store[c] = np.concatenate([old, new])[-self.size:]

    def ready(self, min_rows: int) -> bool:
        return all(s.shape[0] >= min_rows for s in self.store)

    def as_set(self, names, widths) -> LabeledFeatureSet:
        x = np.concatenate(self.store)
        y = np.concatenate([np.full(s.shape[0], c) for c, s in enumerate(self.store)])
        ms = ModalitySet(np.split(x, np.cumsum(widths)[:-1], axis=1), names)
        return LabeledFeatureSet(ms, y, np.zeros(y.size, bool), len(self.store))


def _synthesize(method, feats: ModalitySet, labels, cfg: TrainConfig, rng: RandomSource, bank, n_classes):
    if method == "feature_mixing":
        mix = MixingConfig(cfg.mixing.n_swap, cfg.mixing.per_sample_masks, rng)
        if len(feats) == 2:
            return feature_mixing(feats, mix)
        if len(feats) == 1:
            return feature_mixing_unimodal(feats.blocks[0], mix)
        return feature_mixing_cyclic(feats, mix)
    if method == "mixup":
        return mixup_synth(feats, cfg.mixup_alpha, rng)
    lfs = LabeledFeatureSet(feats, labels, np.zeros(labels.size, bool), n_classes)
    if method == "npmix":
        if np.unique(labels).size < 2:
            return None
        return npmix_synth(lfs, cfg.npmix_neighbors, cfg.npmix_beta, rng)
    if method == "vos":
        bank.push(concat(feats), labels)
        if not bank.ready(feats.width + 2):
            return None
        return vos_synth(bank.as_set(feats.names, feats.widths), cfg.vos_candidates,
                         cfg.vos_keep_fraction, rng)
    raise ValueError(f"unknown synthesis method {method!r}")


def train_step(net: TwoStreamNet, batch: LabeledFeatureSet, cfg: TrainConfig,
               synth_rng: RandomSource, bank=None, outliers: bool = True):
    """One gradient evaluation; returns (parameter grads, log row values)."""
    lc = cfg.loss
    fwd = forward(net, batch.features)
    y = batch.labels
    parts: dict[str, LossValue] = {}
    if lc.mode == "segmentation":
        parts["focal"] = focal_loss(fwd.fused_logits, y, lam=cfg.focal_lambda)
        parts["lovasz"] = lovasz_softmax(fwd.fused_logits, y)
        loss_cls = parts["focal"].value + parts["lovasz"].value
    else:
        parts["cls"] = cross_entropy(fwd.fused_logits, y)
        loss_cls = parts["cls"].value
    modal_ce = None
    if lc.cross_modal != "none":
        if not net.modal_heads or len(fwd.modal_logits) != 2:
            raise ValueError("cross-modal losses need a 2-stream net with modal heads")
        zc, zl = fwd.modal_logits
        modal_ce = (cross_entropy(zc, y), cross_entropy(zl, y))
        if lc.cross_modal == "a2d":
            parts["a2d"] = a2d_loss(zc, zl, y)
        else:
            parts["xmuda"] = xmuda_loss(zc, zl, fwd.fused_logits)

    res = None
    if outliers and cfg.synth_method != "none":
        res = _synthesize(cfg.synth_method, fwd.stream_feats, y, cfg, synth_rng, bank, net.n_classes)
    head_cache = None
    if res is not None:
        out_logits, head_cache = head_forward(net, concat(res.outliers))
        parts["ent"] = entropy_max_loss(out_logits)

    if "ent" not in parts and lc.gamma1 != 0:
        # no outliers this step (warm-up, or an unfilled VOS bank)
        lc = dataclasses.replace(lc, gamma1=0.0)
    total = combined_loss(parts, lc)
    g = total.grad
    grad_modal = None
    if modal_ce is not None:
        grad_modal = [modal_ce[k].grad + g.get(role, 0.0) for k, role in enumerate(("modal_c", "modal_l"))]
    grad_feats = None
    ograds = {}
    if head_cache is not None and "outlier" in g:
        ograds, gx = head_backward(net, head_cache, g["outlier"])
        if res.pullback is not None:
            gblocks = np.split(gx, np.cumsum(res.outliers.widths)[:-1], axis=1)
            grad_feats = res.pullback(gblocks)
    grads = backward(net, fwd.cache, g["fused"], grad_modal, grad_feats)
    for k, v in ograds.items():
        grads[k] = grads[k] + v
    loss_total = total.value
    loss_xm = 0.0
    if modal_ce is not None:
        loss_total += modal_ce[0].value + modal_ce[1].value
        loss_xm = parts[lc.cross_modal].value
    loss_ent = parts["ent"].value if "ent" in parts else 0.0
    return grads, (loss_total, loss_cls, loss_ent, loss_xm)


def train(net: TwoStreamNet, data: LabeledFeatureSet, cfg: TrainConfig):
    """Constant-step gradient descent on the combined objective.

    Returns ``(net, log)``; ``net`` is trained in place. Training data must be
    ID only.
    """
    if data.is_ood.any():
        raise ValueError("training data must not contain OOD rows")
    if data.n_classes != net.n_classes:
        raise ValueError("dataset and network disagree on the number of classes")
    root = RandomSource(cfg.seed)
    batch_rng = root.child("batch")
    synth_rng = root.child("synth")
    bank = _FeatureBank(net.n_classes, cfg.vos_bank_size) if cfg.synth_method == "vos" else None
    log = TrainLog()
    n = data.n_rows
    bs = min(cfg.batch_size, n)
    for step in range(cfg.steps):
        idx = batch_rng.generator.choice(n, size=bs, replace=False)
        grads, row = train_step(net, data.rows(idx), cfg, synth_rng, bank,
                                outliers=step >= cfg.outlier_start_step)
        net.apply_update(grads, cfg.step_size)
        log.rows.append((step, *row))
    return net, log


def predict_logits(net: TwoStreamNet, ms: ModalitySet) -> np.ndarray:
    return forward(net, ms).fused_logits


MODEL_MAGIC = b"FMIXNET\x00"
MODEL_VERSION = 1


def save_model(net: TwoStreamNet, path):
    """Write the portable little-endian binary model format (see docs/formats.md)."""
    header = net.header()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(header)))
        fh.write(struct.pack(f"<{len(header)}I", *header))
        for name in net.param_names():
            fh.write(np.ascontiguousarray(net.params[name], dtype="<f8").tobytes())


def load_model(path) -> TwoStreamNet:
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a featmix model file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    header = struct.unpack_from(f"<{count}I", data, 16)
    n_streams = header[0]
    widths = [header[1 + 3 * k] for k in range(n_streams)]
    hidden = header[2:4]
    head_hidden, n_classes, modal = header[1 + 3 * n_streams:]
    net = TwoStreamNet(widths, hidden, n_classes, head_hidden, bool(modal), zero=True)
    offset = 16 + 4 * count
    for name in net.param_names():
        arr = net.params[name]
        nbytes = arr.size * 8
        if offset + nbytes > len(data):
            raise ValueError(f"{path}: truncated parameter block")
        net.params[name] = np.frombuffer(data, dtype="<f8", count=arr.size, offset=offset).reshape(arr.shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return net
