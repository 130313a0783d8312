"""Multimodal outlier synthesis by feature mixing, with baselines, losses and metrics."""
from .core import DimensionError, LabeledFeatureSet, ModalitySet, RandomSource, concat
from .metrics import MetricsReport, compute_ood_metrics
from .scores import score
from .synth import (
    MixingConfig,
    SynthesisResult,
    feature_mixing,
    feature_mixing_cyclic,
    feature_mixing_unimodal,
    mixup_synth,
    npmix_synth,
    vos_synth,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "LabeledFeatureSet", "ModalitySet", "RandomSource", "concat",
    "MetricsReport", "compute_ood_metrics", "score",
    "MixingConfig", "SynthesisResult", "feature_mixing", "feature_mixing_cyclic",
    "feature_mixing_unimodal", "mixup_synth", "npmix_synth", "vos_synth",
]
