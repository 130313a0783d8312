"""Run configuration: one flat schema shared by CLI flags and the INI snapshot.

Values resolve as schema default < config file < command-line flag. The
snapshot (``config.resolved``) lists every key of every section a command
uses, in schema order, so replaying it reproduces the run exactly.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass

from .bench import BenchSettings
from .datagen import GeneratorSpec
from .losses import CombinedLossConfig
from .model import TrainConfig, TwoStreamNet
from .core import RandomSource
from .synth import MixingConfig


@dataclass(frozen=True)
class Field:
    section: str
    key: str
    kind: str  # int, float, bool, str, ints, floats, opt_int, offset, strs
    default: object
    flag: str
    help: str = ""


_D = GeneratorSpec()

FIELDS = (
    Field("run", "seed", "int", 0, "--seed", "root seed; every random stream derives from it"),
    Field("data", "n_id_classes", "int", _D.n_id_classes, "--n-id-classes"),
    Field("data", "n_ood_classes", "int", _D.n_ood_classes, "--n-ood-classes"),
    Field("data", "dim_per_modality", "ints", _D.dim_per_modality, "--dims", "comma list, one width per modality"),
    Field("data", "class_mean_scale", "float", _D.class_mean_scale, "--class-scale"),
    Field("data", "within_class_std", "float", _D.within_class_std, "--class-std"),
    Field("data", "modality_mean_offset", "offset", _D.modality_mean_offset, "--modality-offset"),
    Field("data", "samples_per_class", "int", _D.samples_per_class, "--samples-per-class"),
    Field("data", "test_samples_per_class", "opt_int", None, "--test-samples-per-class"),
    Field("data", "ood_classes", "ints", (), "--ood-classes", "generation indices playing OOD (empty: the last ones)"),
    Field("data", "train_file", "str", "", "--train-data", "train on this dataset file instead of generating one"),
    Field("data", "write_csv", "bool", False, "--csv", "gen also writes CSV copies"),
    Field("model", "hidden", "ints", (64, 32), "--hidden"),
    Field("model", "head_hidden", "int", 64, "--head-hidden", "0 makes the fused head linear"),
    Field("train", "steps", "int", 2000, "--steps"),
    Field("train", "batch_size", "int", 128, "--batch-size"),
    Field("train", "step_size", "float", 0.05, "--step-size"),
    Field("train", "synth", "str", "none", "--synth", "none|feature_mixing|mixup|vos|npmix"),
    Field("train", "n_swap", "int", 10, "--n-swap"),
    Field("train", "per_sample_masks", "bool", False, "--per-sample-masks"),
    Field("train", "outlier_start_step", "int", 500, "--warmup", "steps before outlier optimization starts"),
    Field("train", "gamma1", "float", 3.0, "--gamma1"),
    Field("train", "gamma2", "opt_float", None, "--gamma2"),
    Field("train", "mode", "str", "detection", "--mode", "detection|segmentation"),
    Field("train", "cross_modal", "str", "none", "--cross-modal", "none|a2d|xmuda"),
    Field("train", "focal_lambda", "float", 2.0, "--focal-lambda"),
    Field("train", "mixup_alpha", "float", 1.0, "--mixup-alpha"),
    Field("train", "vos_candidates", "int", 1000, "--vos-candidates"),
    Field("train", "vos_keep_fraction", "float", 0.01, "--vos-keep"),
    Field("train", "vos_bank_size", "int", 256, "--vos-bank"),
    Field("train", "npmix_neighbors", "int", 8, "--npmix-neighbors"),
    Field("train", "npmix_beta", "floats", (0.5, 1.5), "--npmix-beta"),
    Field("score", "method", "str", "maxlogit", "--score", "maxlogit|msp|energy|entropy|gen"),
    Field("score", "temperature", "float", 1.0, "--score-temp"),
    Field("score", "gamma", "float", 0.1, "--score-gamma"),
    Field("score", "top_m", "opt_int", None, "--score-topm"),
    Field("paths", "model", "str", "", "--model"),
    Field("paths", "data", "str", "", "--data"),
    Field("verify", "theorem", "str", "both", "--theorem", "1|2|both"),
    Field("verify", "dim", "int", 32, "--dim", "per-modality dimension"),
    Field("verify", "n_swap", "int", 8, "--n-swap"),
    Field("verify", "mu_offset", "float", 2.0, "--mu-offset", "mu_l - mu_c per coordinate"),
    Field("verify", "trials", "int", 100_000, "--trials"),
    Field("verify", "exact_moments", "bool", False, "--exact-moments"),
    Field("verify", "t2_trials", "int", 10_000, "--t2-trials"),
    Field("verify", "t2_rows", "int", 64, "--t2-rows"),
    Field("sweep", "n_values", "ints", (0, 2, 4, 8, 16), "--n-values"),
    Field("sweep", "n_seeds", "int", 1, "--n-seeds"),
    Field("sweep", "parallel", "int", 1, "--parallel"),
    Field("compare", "methods", "strs", ("feature_mixing", "mixup", "vos", "npmix"), "--methods"),
    Field("bench", "shape", "str", "detection", "--bench-shape", "detection|segmentation|custom"),
    Field("bench", "rows", "int", 1024, "--bench-rows", "custom shape only"),
    Field("bench", "widths", "ints", (64, 64), "--bench-widths", "custom shape only"),
    Field("bench", "repeats", "int", 5, "--repeats"),
    Field("bench", "methods", "strs", ("feature_mixing", "mixup", "vos", "npmix"), "--bench-methods"),
    Field("bench", "npmix_neighbors", "int", BenchSettings.npmix_neighbors, "--bench-npmix-neighbors"),
    Field("bench", "vos_candidates", "int", BenchSettings.vos_candidates, "--bench-vos-candidates"),
)

#: sections each subcommand reads (and snapshots)
COMMAND_SECTIONS = {
    "gen": ("run", "data"),
    "train": ("run", "data", "model", "train"),
    "eval": ("run", "score", "paths"),
    "verify": ("run", "verify"),
    "sweep-n": ("run", "data", "model", "train", "score", "sweep"),
    "compare": ("run", "data", "model", "train", "score", "compare"),
    "bench": ("run", "bench"),
}


def fields_for(command: str):
    secs = COMMAND_SECTIONS[command]
    return [f for f in FIELDS if f.section in secs]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text: str):
    return [p.strip() for p in text.split(",") if p.strip()]


def parse_value(kind: str, text: str):
    """Convert a flag or INI string to the field's type."""
    text = text.strip()
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        return _bool(text)
    if kind == "str":
        return text
    if kind == "ints":
        return tuple(int(p) for p in _list(text))
    if kind == "floats":
        return tuple(float(p) for p in _list(text))
    if kind == "strs":
        return tuple(_list(text))
    if kind in ("opt_int", "opt_float"):
        if text in ("", "none", "None"):
            return None
        return int(text) if kind == "opt_int" else float(text)
    if kind == "offset":
        vals = [float(p) for p in _list(text)]
        return vals[0] if len(vals) == 1 else tuple(vals)
    raise AssertionError(kind)


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


class RunConfig:
    """Resolved settings for one subcommand."""

    def __init__(self, command: str, values: dict | None = None):
        if command not in COMMAND_SECTIONS:
            raise ValueError(f"unknown command {command!r}")
        self.command = command
        self.values = {(f.section, f.key): f.default for f in fields_for(command)}
        for k, v in (values or {}).items():
            self.set(*k, v)

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    def set(self, section: str, key: str, value):
        if (section, key) not in self.values:
            raise KeyError(f"{self.command} has no setting [{section}] {key}")
        self.values[(section, key)] = value

    def replace(self, **updates) -> "RunConfig":
        """Copy with ``section__key=value`` overrides."""
        rc = RunConfig(self.command, dict(self.values))
        for name, v in updates.items():
            sec, key = name.split("__")
            rc.set(sec, key, v)
        return rc

    @property
    def seed(self) -> int:
        return self.get("run", "seed")

    # -- INI round trip -------------------------------------------------
    def to_ini(self) -> str:
        lines = [f"# featmix {self.command}", ""]
        section = None
        for f in fields_for(self.command):
            if f.section != section:
                if section is not None:
                    lines.append("")
                lines.append(f"[{f.section}]")
                section = f.section
            lines.append(f"{f.key} = {format_value(self.get(f.section, f.key))}".rstrip())
        return "\n".join(lines) + "\n"

    def update_from_ini(self, text: str, source: str = "<config>"):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text, source=source)
        known = {(f.section, f.key): f for f in fields_for(self.command)}
        for sec in cp.sections():
            for key, raw in cp.items(sec):
                f = known.get((sec, key))
                if f is None:
                    # settings of other commands may appear in a shared file
                    if not any(g.section == sec and g.key == key for g in FIELDS):
                        raise ValueError(f"{source}: unknown setting [{sec}] {key}")
                    continue
                try:
                    self.values[(sec, key)] = parse_value(f.kind, raw)
                except ValueError as exc:
                    raise ValueError(f"{source}: bad value for [{sec}] {key}: {exc}") from None

    # -- builders -------------------------------------------------------
    def generator_spec(self, seed: int | None = None) -> GeneratorSpec:
        g = lambda k: self.get("data", k)  # noqa: E731
        ood = g("ood_classes") or None
        return GeneratorSpec(
            n_id_classes=g("n_id_classes"), n_ood_classes=g("n_ood_classes"),
            dim_per_modality=g("dim_per_modality"), class_mean_scale=g("class_mean_scale"),
            within_class_std=g("within_class_std"), modality_mean_offset=g("modality_mean_offset"),
            samples_per_class=g("samples_per_class"), test_samples_per_class=g("test_samples_per_class"),
            seed=self.seed if seed is None else seed, ood_classes=ood)

    def train_config(self, seed: int | None = None, synth: str | None = None,
                     n_swap: int | None = None) -> TrainConfig:
        t = lambda k: self.get("train", k)  # noqa: E731
        synth = t("synth") if synth is None else synth
        seed = self.seed if seed is None else seed
        gamma1 = t("gamma1") if synth != "none" else 0.0
        loss = CombinedLossConfig(gamma1=gamma1, gamma2=t("gamma2"), mode=t("mode"),
                                  cross_modal=t("cross_modal"))
        return TrainConfig(
            steps=t("steps"), batch_size=t("batch_size"), step_size=t("step_size"),
            synth_method=synth,
            mixing=MixingConfig(t("n_swap") if n_swap is None else n_swap, t("per_sample_masks")),
            loss=loss, seed=seed, focal_lambda=t("focal_lambda"), mixup_alpha=t("mixup_alpha"),
            vos_candidates=t("vos_candidates"), vos_keep_fraction=t("vos_keep_fraction"),
            vos_bank_size=t("vos_bank_size"), npmix_neighbors=t("npmix_neighbors"),
            npmix_beta=t("npmix_beta"), outlier_start_step=t("outlier_start_step"))

    def build_net(self, input_widths, n_classes: int, seed: int | None = None) -> TwoStreamNet:
        seed = self.seed if seed is None else seed
        return TwoStreamNet(input_widths, self.get("model", "hidden"), n_classes,
                            self.get("model", "head_hidden"),
                            modal_heads=self.get("train", "cross_modal") != "none",
                            rng=RandomSource(seed).child("init"))

    def score_kwargs(self) -> dict:
        return {"method": self.get("score", "method"), "temperature": self.get("score", "temperature"),
                "gamma": self.get("score", "gamma"), "top_m": self.get("score", "top_m")}
