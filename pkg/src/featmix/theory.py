"""Monte-Carlo checks of the two Feature Mixing properties.

* Low likelihood: outliers made by swapping dimensions between two Gaussian
  modalities with different means have a larger expected squared Mahalanobis
  distance (and lower log-likelihood) than ID samples, whose D^2 is
  chi-squared with 2d degrees of freedom. The outlier mean moves by
  ``(N/d) [mu_l - mu_c; mu_c - mu_l]``.
* Bounded deviation: ``||F_o - F||_2 <= sqrt(2N) * delta`` with
  ``delta = max_ij |F_c[i] - F_l[j]|``, checked per row.

All statistical gates use 3 standard errors.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .core import ModalitySet, RandomSource
from .gaussian import GaussianMoments, estimate_moments, gaussian_loglik, mahalanobis_sq
from .synth import MixingConfig, feature_mixing

#: relative slack on the deterministic bound, covering float rounding in the norm
BOUND_RTOL = 1e-12


@dataclass
class TwoModalGaussian:
    """Joint Gaussian over ``[F_c; F_l]`` used by the likelihood check.

    ``cov`` is the full ``2d x 2d`` covariance; identity when omitted.
    """

    mu_c: np.ndarray
    mu_l: np.ndarray
    cov: np.ndarray | None = None

    def __post_init__(self):
        self.mu_c = np.asarray(self.mu_c, dtype=np.float64).reshape(-1)
        self.mu_l = np.asarray(self.mu_l, dtype=np.float64).reshape(-1)
        if self.mu_c.shape != self.mu_l.shape:
            raise ValueError("modality means must have the same length")
        if self.cov is None:
            self.cov = np.eye(2 * self.d)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (2 * self.d, 2 * self.d):
            raise ValueError(f"cov must be {2 * self.d}x{2 * self.d}")

    @property
    def d(self) -> int:
        return self.mu_c.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([self.mu_c, self.mu_l])

    @classmethod
    def isotropic(cls, d: int, offset: float, mu_c: float = 0.0) -> "TwoModalGaussian":
        """Identity covariance, ``mu_c = mu_c * 1`` and ``mu_l = mu_c + offset * 1``."""
        return cls(np.full(d, mu_c), np.full(d, mu_c + offset))

    def sample(self, rng: RandomSource, n: int) -> np.ndarray:
        chol = np.linalg.cholesky(self.cov)
        z = rng.generator.standard_normal((n, 2 * self.d))
        return self.mean + z @ chol.T


@dataclass
class TheoremReport:
    theorem: int
    n_trials: int
    n_swap: int
    dim_per_modality: int
    mean_d2_id: float = float("nan")
    se_d2_id: float = float("nan")
    mean_d2_outlier: float = float("nan")
    se_d2_outlier: float = float("nan")
    shift_quadratic: float = float("nan")
    predicted_mean_shift: np.ndarray = field(default_factory=lambda: np.empty(0))
    empirical_mean_shift: np.ndarray = field(default_factory=lambda: np.empty(0))
    se_mean_shift: np.ndarray = field(default_factory=lambda: np.empty(0))
    mean_loglik_id: float = float("nan")
    mean_loglik_outlier: float = float("nan")
    trace_term: float = float("nan")
    bound_violations: int = 0
    rows_checked: int = 0
    max_bound_ratio: float = float("nan")
    max_deviation: float = 0.0
    gates: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.gates.values())

    def to_dict(self) -> dict:
        """Plain-type fields; ones the theorem does not use (NaN or empty) are left out."""
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                if v.size == 0:
                    continue
                v = [float(x) for x in v]
            elif isinstance(v, (np.floating, np.integer)):
                v = v.item()
            if isinstance(v, float) and np.isnan(v):
                continue
            out[f.name] = v
        out["passed"] = self.passed
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    def to_text(self) -> str:
        """Flat ``key = value`` record, one metric per line.

        Vectors are written as space-separated numbers; gates as
        ``gate.<name> = pass|fail``.
        """
        lines = []
        for key, v in self.to_dict().items():
            if key == "gates":
                for g, ok in v.items():
                    lines.append(f"gate.{g} = {'pass' if ok else 'fail'}")
            elif isinstance(v, list):
                lines.append(f"{key} = " + " ".join(repr(x) for x in v))
            else:
                lines.append(f"{key} = {v!r}" if isinstance(v, float) else f"{key} = {v}")
        return "\n".join(lines) + "\n"


def predicted_mean_shift(mu_c, mu_l, n_swap: int, d: int) -> np.ndarray:
    """Expected outlier mean minus ID mean: ``(N/d) [mu_l - mu_c; mu_c - mu_l]``.

    Exact for the swap as written when each modality mean is constant
    across coordinates; with independent index draws a non-constant mean
    is averaged over the source block instead.
    """
    mu_c = np.asarray(mu_c, dtype=np.float64).reshape(-1)
    mu_l = np.asarray(mu_l, dtype=np.float64).reshape(-1)
    if mu_c.shape != mu_l.shape or mu_c.shape[0] != d:
        raise ValueError(f"means must both have length d={d}")
    if not 0 <= n_swap <= d:
        raise ValueError("n_swap must lie in [0, d]")
    diff = mu_l - mu_c
    return (n_swap / d) * np.concatenate([diff, -diff])


def verify_theorem1(gen: TwoModalGaussian, cfg: MixingConfig, n_trials: int,
                    exact_moments: bool = False, n_holdout: int = 100_000,
                    chunk: int = 20_000) -> TheoremReport:
    """Monte-Carlo check that mixed outliers fall in low-likelihood regions.

    Each trial draws one ID sample and mixes it with its own random selection,
    so averages are over both the data and the masks. ID moments come from
    ``n_holdout`` separate draws unless ``exact_moments`` is set.
    """
    if np.array_equal(gen.mu_c, gen.mu_l):
        raise ValueError("the low-likelihood property requires mu_c != mu_l")
    d = gen.d
    if cfg.n_swap > d:
        raise ValueError(f"n_swap={cfg.n_swap} exceeds modality width {d}")
    rng = cfg.rng
    if exact_moments:
        gm = GaussianMoments.from_mean_cov(gen.mean, gen.cov)
    else:
        gm = estimate_moments(gen.sample(rng.child("holdout"), n_holdout))
    mix_cfg = MixingConfig(cfg.n_swap, per_sample_masks=True, rng=rng.child("masks"))
    data_rng = rng.child("id")

    d2_id, d2_out, ll_id, ll_out, diffs = [], [], [], [], []
    out_sum = np.zeros(2 * d)
    out_outer = np.zeros((2 * d, 2 * d))
    done = 0
    while done < n_trials:
        m = min(chunk, n_trials - done)
        f = gen.sample(data_rng, m)
        res = feature_mixing(ModalitySet([f[:, :d], f[:, d:]]), mix_cfg)
        fo = np.concatenate(res.outliers.blocks, axis=1)
        d2_id.append(mahalanobis_sq(f, gm))
        d2_out.append(mahalanobis_sq(fo, gm))
        ll_id.append(gaussian_loglik(f, gm))
        ll_out.append(gaussian_loglik(fo, gm))
        diffs.append(fo - f)
        out_sum += fo.sum(axis=0)
        out_outer += fo.T @ fo
        done += m

    d2_id = np.concatenate(d2_id)
    d2_out = np.concatenate(d2_out)
    diffs = np.concatenate(diffs)
    n = n_trials
    pred = predicted_mean_shift(gen.mu_c, gen.mu_l, cfg.n_swap, d)
    emp = diffs.mean(axis=0)
    se_shift = diffs.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(2 * d, np.inf)
    # zero-variance coordinates (n_swap=0) must match exactly
    se_shift = np.where(se_shift > 0, se_shift, 0.0)

    shift_quad = float(pred @ gm.cov_inverse @ pred)
    se_id = float(np.sqrt(2.0 * 2 * d / n))
    se_out = float(d2_out.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    mean_out = out_sum / n
    cov_out = (out_outer - n * np.outer(mean_out, mean_out)) / max(n - 1, 1)
    trace_term = float(np.trace(gm.cov_inverse @ cov_out) - 2 * d)

    rep = TheoremReport(
        theorem=1, n_trials=n, n_swap=cfg.n_swap, dim_per_modality=d,
        mean_d2_id=float(d2_id.mean()), se_d2_id=se_id,
        mean_d2_outlier=float(d2_out.mean()), se_d2_outlier=se_out,
        shift_quadratic=shift_quad,
        predicted_mean_shift=pred, empirical_mean_shift=emp, se_mean_shift=se_shift,
        mean_loglik_id=float(np.concatenate(ll_id).mean()),
        mean_loglik_outlier=float(np.concatenate(ll_out).mean()),
        trace_term=trace_term,
    )
    rep.gates = {
        "id_d2_matches_2d": abs(rep.mean_d2_id - 2 * d) <= 3 * se_id,
        "mean_shift_within_3se": bool(np.all(np.abs(emp - pred) <= 3 * se_shift)),
    }
    if cfg.n_swap > 0:
        rep.gates.update({
            "outlier_d2_exceeds_id": rep.mean_d2_outlier > rep.mean_d2_id,
            "outlier_d2_shift_bound": rep.mean_d2_outlier - 2 * d >= shift_quad - 3 * se_out,
            "outlier_loglik_lower": rep.mean_loglik_outlier < rep.mean_loglik_id,
        })
    return rep


def swap_deviation_bound(fc: np.ndarray, fl: np.ndarray, n_swap: int) -> np.ndarray:
    """Per-row ``sqrt(2N) * delta`` where ``delta = max_ij |fc[i] - fl[j]|``."""
    delta = np.maximum(fc.max(axis=1) - fl.min(axis=1), fl.max(axis=1) - fc.min(axis=1))
    return np.sqrt(2.0 * n_swap) * delta


def verify_theorem2(ms: ModalitySet, cfg: MixingConfig, n_trials: int) -> TheoremReport:
    """Count rows violating ``||F_o - F||_2 <= sqrt(2N) delta`` over repeated mixes.

    Every trial is an independent ``feature_mixing`` call on ``ms`` with a fresh
    selection. A violation needs the deviation to exceed the bound by more than
    a relative ``BOUND_RTOL``.
    """
    if len(ms) != 2:
        raise ValueError("the deviation bound is stated for 2 modalities")
    fc, fl = ms.blocks
    f = np.concatenate([fc, fl], axis=1)
    bound = swap_deviation_bound(fc, fl, cfg.n_swap)
    violations = 0
    max_ratio = 0.0
    max_dev = 0.0
    for _ in range(n_trials):
        res = feature_mixing(ms, cfg)
        fo = np.concatenate(res.outliers.blocks, axis=1)
        dev = np.sqrt(np.sum((fo - f) ** 2, axis=1))
        violations += int(np.count_nonzero(dev > bound * (1.0 + BOUND_RTOL)))
        max_dev = max(max_dev, float(dev.max()))
        pos = bound > 0
        if pos.any():
            max_ratio = max(max_ratio, float((dev[pos] / bound[pos]).max()))
    rep = TheoremReport(
        theorem=2, n_trials=n_trials, n_swap=cfg.n_swap, dim_per_modality=min(ms.widths),
        bound_violations=violations, rows_checked=n_trials * ms.n_rows,
        max_bound_ratio=max_ratio, max_deviation=max_dev,
    )
    rep.gates = {"zero_bound_violations": violations == 0}
    return rep
