import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stilt_bench.errors import DegenerateInputError, DimensionError
from stilt_bench.metrics import confusion, contingency, evaluate, weighted_metrics


def brute_force(labels, preds):
    """Recompute weighted P/R/F1 straight from the raw vectors, one sample at a time."""
    n = len(labels)
    out = {"p": 0.0, "r": 0.0, "f1": 0.0}
    for c in range(3):
        tp = sum(1 for y, p in zip(labels, preds) if y == c and p == c)
        predicted = sum(1 for p in preds if p == c)
        actual = sum(1 for y in labels if y == c)
        prec = tp / predicted if predicted else 0.0
        rec = tp / actual if actual else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        w = actual / n
        out["p"] += w * prec
        out["r"] += w * rec
        out["f1"] += w * f1
    return out


def test_confusion_perfect():
    c = confusion([0, 1, 2], [0, 1, 2])
    assert c.tp == (1, 1, 1) and c.fp == (0, 0, 0) and c.fn == (0, 0, 0)


def test_confusion_hand_case():
    c = confusion([2, 2, 1, 0], [2, 1, 1, 0])
    assert (c.tp[2], c.fp[2], c.fn[2]) == (1, 0, 1)
    assert (c.tp[1], c.fp[1], c.fn[1]) == (1, 1, 0)
    assert (c.tp[0], c.fp[0], c.fn[0]) == (1, 0, 0)


def test_confusion_empty_is_zero():
    c = confusion([], [])
    assert c.tp == c.fp == c.fn == c.support == (0, 0, 0)


def test_confusion_length_mismatch():
    with pytest.raises(DimensionError):
        confusion([0, 1], [0])


def test_bad_class_id():
    with pytest.raises(DimensionError):
        confusion([0, 3], [0, 1])


def test_weighted_f1_hand_case():
    assert evaluate([2, 2, 1, 0], [2, 1, 1, 0]).weighted_f1 == pytest.approx(0.75, abs=1e-15)


def test_perfect_predictions():
    report = evaluate([0, 1, 2, 2], [0, 1, 2, 2])
    assert report.weighted_f1 == 1.0


def test_empty_counts_rejected():
    with pytest.raises(DegenerateInputError):
        weighted_metrics(confusion([], []))


def test_f1_can_fall_outside_precision_recall_interval():
    # search small instances for one where weighted F1 is not between weighted P and R
    rng = np.random.default_rng(0)
    for _ in range(2000):
        n = int(rng.integers(3, 10))
        r = evaluate(rng.integers(0, 3, n), rng.integers(0, 3, n))
        lo, hi = sorted((r.weighted_precision, r.weighted_recall))
        if not lo - 1e-12 <= r.weighted_f1 <= hi + 1e-12:
            return
    pytest.fail("no instance found with F1 outside [P, R]")


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=60))
def test_properties(pairs):
    labels, preds = map(np.array, zip(*pairs))
    report = evaluate(labels, preds)
    for v in (*report.precision, *report.recall, *report.f1, report.weighted_f1):
        assert 0.0 <= v <= 1.0
    assert sum(report.weights) == pytest.approx(1.0, abs=1e-12)
    # weighted recall is plain accuracy
    assert report.weighted_recall == pytest.approx(np.mean(labels == preds), abs=1e-12)
    perm = np.random.default_rng(len(pairs)).permutation(len(pairs))
    assert evaluate(labels[perm], preds[perm]) == report
    c = confusion(labels, preds)
    assert sum(c.tp) == int(np.sum(labels == preds))
    assert all(n == tp + fn for n, tp, fn in zip(c.support, c.tp, c.fn))


def test_matches_brute_force_small():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        labels = rng.integers(0, 3, n).tolist()
        preds = rng.integers(0, 3, n).tolist()
        ref = brute_force(labels, preds)
        got = evaluate(labels, preds)
        assert abs(got.weighted_f1 - ref["f1"]) <= 1e-12
        assert abs(got.weighted_precision - ref["p"]) <= 1e-12
        assert abs(got.weighted_recall - ref["r"]) <= 1e-12


def test_contingency_cases():
    y = [0, 1, 2, 1]
    assert contingency(y, y, y).both_correct == 4
    wrong = [(v + 1) % 3 for v in y]
    t = contingency(y, y, wrong)
    assert (t.both_correct, t.only_a_correct, t.only_b_correct, t.both_wrong) == (0, 4, 0, 0)


def test_contingency_sums_to_n():
    rng = np.random.default_rng(1)
    y, a, b = (rng.integers(0, 3, 1500) for _ in range(3))
    assert contingency(y, a, b).total == 1500


def test_contingency_length_mismatch():
    with pytest.raises(DimensionError):
        contingency([0, 1], [0, 1], [0])
