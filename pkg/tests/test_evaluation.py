import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import metrics_oracle, tolerant_oracle
from trnet.evaluation import (ConfusionCounts, aggregate_folds, compute_metrics, exact_confusion,
                              format_table, tolerant_confusion)
from trnet.phantom import ConfigError


def _assert_matches_oracle(counts):
    rep = compute_metrics(counts)
    want = metrics_oracle(counts.tp, counts.fp, counts.tn, counts.fn)
    for name, value in want.items():
        if value is None:
            assert name in rep.undefined
        else:
            assert name not in rep.undefined or name == "mcc"
            assert abs(getattr(rep, name) - value) <= 1e-12


def test_metrics_oracle_random_quadruples():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        q = rng.integers(0, 50, size=4)
        q[rng.integers(0, 4)] += rng.integers(0, 2)  # occasionally exercise zero rows
        if q.sum() == 0:
            q[0] = 1
        _assert_matches_oracle(ConfusionCounts(*map(int, q)))


def test_perfect_and_inverted():
    r = compute_metrics(ConfusionCounts(tp=1, fp=0, tn=1, fn=0))
    assert all(getattr(r, m) == 1 for m in ("acc", "sens", "spec", "ppv", "npv", "f1", "mcc"))
    r = compute_metrics(ConfusionCounts(tp=0, fp=1, tn=0, fn=1))
    assert r.acc == 0 and r.mcc == -1


def test_undefined_flags():
    r = compute_metrics(ConfusionCounts(tp=0, fp=0, tn=5, fn=0))
    assert {"sens", "ppv", "f1", "mcc"} <= r.undefined
    assert r.mcc == 0.0 and math.isnan(r.sens)
    assert r.as_row()[1] == "--"
    assert r.to_dict()["sens"] is None


def test_all_zero_counts_rejected():
    with pytest.raises(ValueError):
        compute_metrics(ConfusionCounts())
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1)


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.integers(0, 1000)] * 4).filter(lambda q: sum(q) > 0), st.integers(1, 50))
def test_scale_invariance(q, k):
    a = compute_metrics(ConfusionCounts(*q))
    b = compute_metrics(ConfusionCounts(*(k * v for v in q)))
    for m in ("acc", "sens", "spec", "ppv", "npv", "f1", "mcc"):
        x, y = getattr(a, m), getattr(b, m)
        assert (math.isnan(x) and math.isnan(y)) or abs(x - y) <= 1e-12
    assert a.undefined == b.undefined


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.integers(1, 1000)] * 4))
def test_rate_identities(q):
    tp, fp, tn, fn = q
    r = compute_metrics(ConfusionCounts(*q))
    assert r.sens + fn / (tp + fn) == pytest.approx(1, abs=1e-12)
    assert r.spec + fp / (tn + fp) == pytest.approx(1, abs=1e-12)


def test_aggregate_folds():
    c = ConfusionCounts(3, 1, 7, 2)
    assert aggregate_folds([c]).to_dict() == compute_metrics(c).to_dict()
    two = aggregate_folds([c, c])
    for m in ("acc", "sens", "spec", "ppv", "npv", "f1", "mcc"):
        assert getattr(two, m) == pytest.approx(getattr(compute_metrics(c), m), abs=1e-12)
    assert aggregate_folds([ConfusionCounts(tp=1), ConfusionCounts(fp=1)]).ppv == 0.5


def _track(start=40, stop=60, n=100):
    t = np.zeros(n, dtype=np.int8)
    t[start:stop] = 1
    return t


@pytest.mark.parametrize("center,outcome", [(35, "fp"), (36, "tp"), (39, "tp"), (63, "tp"), (64, "fp")])
def test_boundary_positive(center, outcome):
    c = tolerant_confusion([1], [center], _track(), tolerance=5)
    assert getattr(c, outcome) == 1 and c.total == 1


@pytest.mark.parametrize("center,outcome", [(44, "fn"), (43, "tn"), (55, "fn"), (56, "tn")])
def test_boundary_negative_symmetric(center, outcome):
    c = tolerant_confusion([0], [center], _track(), tolerance=5)
    assert getattr(c, outcome) == 1


def test_asymmetric_mode_judges_negatives_on_center_only():
    c = tolerant_confusion([0], [43], _track(), tolerance=5, symmetric=False)
    assert c.fn == 1


def test_interior_disagreements_never_forgiven():
    t = _track(20, 80)
    centers = list(range(0, 100, 5))
    truth = [int(t[z]) for z in centers]
    pred = [1 - v if 25 <= z < 75 else v for v, z in zip(truth, centers)]
    c = tolerant_confusion(pred, centers, t, tolerance=5)
    assert c.fn == sum(1 for z in centers if 25 <= z < 75)


def test_tolerance_zero_is_exact_on_random_tracks():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 200))
        track = (rng.random(n) < rng.random()).astype(np.int8)
        centers = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
        pred = rng.integers(0, 2, size=len(centers))
        assert tolerant_confusion(pred, centers, track, tolerance=0) == exact_confusion(pred, track[centers])


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=80), st.data())
def test_matches_bruteforce_and_is_monotone(track, data):
    track = np.array(track)
    n = len(track)
    centers = data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=20))
    pred = data.draw(st.lists(st.integers(0, 1), min_size=len(centers), max_size=len(centers)))
    sym = data.draw(st.booleans())
    prev = -1
    for tol in range(0, 9):
        c = tolerant_confusion(pred, centers, track, tol, sym)
        assert (c.tp, c.fp, c.tn, c.fn) == tolerant_oracle(pred, centers, track, tol, sym)
        assert c.tp + c.tn >= prev
        prev = c.tp + c.tn


def test_tolerance_errors():
    with pytest.raises(ConfigError):
        tolerant_confusion([1], [0], [1], tolerance=-1)
    with pytest.raises(ValueError):
        tolerant_confusion([1], [5], [1, 0], tolerance=5)


def test_format_table_column_order():
    text = format_table([("TR-Net", compute_metrics(ConfusionCounts(5, 1, 10, 2)))])
    header, row = text.strip().split("\n")
    assert header.split("\t") == ["Method", "ACC", "Sens", "Spec", "PPV", "NPV", "F1", "MCC"]
    assert row.split("\t")[1] == f"{15 / 18:.2f}"
