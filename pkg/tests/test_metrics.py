import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from featmix.core import RandomSource
from featmix.metrics import (
    MetricsReport,
    aupr_ood,
    auroc,
    brute_force_auroc,
    compute_ood_metrics,
    fpr_at_tpr,
    id_accuracy,
)


def _case(gen):
    n = int(gen.integers(2, 201))
    # coarse grid so ties are common
    s = np.round(gen.standard_normal(n), int(gen.integers(0, 3)))
    o = gen.random(n) < gen.uniform(0.1, 0.9)
    o[0], o[1] = True, False
    return s, o


def test_examples():
    r = compute_ood_metrics([3.0, 2.0, 1.0, 0.0], [False, False, True, True])
    assert r.auroc == 1.0 and r.fpr_at_95 == 0.0 and r.aupr == 1.0
    assert auroc([1.0] * 6, [0, 0, 0, 1, 1, 1]) == 0.5
    assert auroc([3, 1, 2, 0], [0, 0, 1, 1]) == 0.75
    assert brute_force_auroc([1, 0], [0, 1]) == 1.0
    assert brute_force_auroc([0, 1], [0, 1]) == 0.0


def test_auroc_matches_brute_force():
    gen = RandomSource(11).generator
    for _ in range(1000):
        s, o = _case(gen)
        assert abs(auroc(s, o) - brute_force_auroc(s, o)) <= 1e-12


def _brute_ap(s, o):
    """Step-wise average precision by direct counting at every distinct threshold."""
    area, prev_recall = 0.0, 0.0
    for t in np.unique(-s)[::-1]:
        flagged = -s >= t
        tp = np.sum(flagged & o)
        recall = tp / o.sum()
        area += (recall - prev_recall) * tp / flagged.sum()
        prev_recall = recall
    return area


def test_aupr_matches_brute_force():
    gen = RandomSource(12).generator
    for _ in range(300):
        s, o = _case(gen)
        assert aupr_ood(s, o) == pytest.approx(_brute_ap(s, o), abs=1e-12)


def test_aupr_hand_example():
    # ranked by -score: OOD, ID, OOD, ID -> AP = (1 + 2/3) / 2
    assert aupr_ood([0.0, 1.0, 2.0, 3.0], [True, False, True, False]) == pytest.approx(5 / 6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=40), st.data())
def test_monotone_invariance(scores, data):
    s = np.array(scores)
    o = np.array(data.draw(st.lists(st.booleans(), min_size=len(s), max_size=len(s))))
    o[0], o[1] = True, False
    a = compute_ood_metrics(s, o)
    for t in (np.exp(s) * 3.0 - 7.0, np.arctan(s), s * 8.0 + 1.0):
        # rounding may merge nearby floats; only order-preserving images count
        assume(np.array_equal(np.sign(np.subtract.outer(t, t)), np.sign(np.subtract.outer(s, s))))
        b = compute_ood_metrics(t, o)
        assert a.auroc == b.auroc and a.aupr == b.aupr and a.fpr_at_95 == b.fpr_at_95


def test_fpr_threshold_is_strictest_meeting_tpr():
    ids = np.arange(1, 21, dtype=float)  # 20 ID rows, 95% keeps 19 of them: threshold 2
    ood = np.array([1.5, 2.0, 2.5, 0.0])
    s = np.r_[ids, ood]
    o = np.r_[np.zeros(20, bool), np.ones(4, bool)]
    assert fpr_at_tpr(s, o) == 0.5
    assert fpr_at_tpr(s, o, tpr=1.0) == 0.75


def test_fpr_with_tied_threshold():
    s = np.array([1.0, 1.0, 1.0, 1.0, 0.5])
    o = np.array([False, False, True, True, True])
    assert fpr_at_tpr(s, o) == pytest.approx(2 / 3)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        compute_ood_metrics([1.0, 2.0], [False, False])
    with pytest.raises(ValueError):
        auroc([1.0], [False, True])


def test_brute_force_size_guard():
    with pytest.raises(ValueError):
        brute_force_auroc(np.zeros(4), [0, 0, 1, 1], max_pairs=3)


def test_id_accuracy():
    z = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 1.0], [5.0, 0.0]])
    assert id_accuracy(z, [0, 1, 0, 1]) == 0.75
    assert id_accuracy(z[:2], [0, 1]) == 1.0
    assert id_accuracy(z[:2], [1, 0]) == 0.0


def test_report_serialization():
    r = compute_ood_metrics([0.1, 0.9, 0.4], [True, False, False], 0.5)
    assert isinstance(r, MetricsReport)
    assert r.to_csv().splitlines()[0] == "auroc,aupr,fpr_at_95,id_accuracy,n_id,n_ood"
    assert '"n_ood": 1' in r.to_json()
