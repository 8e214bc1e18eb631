import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tseg import metrics as M
from tseg.errors import DimensionError


def hd95_oracle(p, t, spacing, directed=False):
    """All-pairs distances in plain numpy, then the linear-interpolated 95th percentile."""
    a = np.argwhere(p) * np.asarray(spacing)
    b = np.argwhere(t) * np.asarray(spacing)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))

    def q95(v):
        v = np.sort(v)
        pos = 0.95 * (len(v) - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, len(v) - 1)
        return v[lo] + (pos - lo) * (v[hi] - v[lo])

    forward = q95(d.min(axis=1))
    return forward if directed else max(forward, q95(d.min(axis=0)))


def counts_oracle(p, t):
    tp = sum(1 for a, b in zip(p.ravel(), t.ravel()) if a and b)
    return tp, int(p.sum()), int(t.sum())


def random_pair(rng, shape=(10, 12, 14), max_fg=200):
    def one():
        n = int(rng.integers(1, max_fg + 1))
        m = np.zeros(shape, bool)
        m.ravel()[rng.choice(m.size, n, replace=False)] = True
        return m
    return one(), one()


def test_dice_examples():
    p = np.zeros((2, 2, 2), bool)
    p[0, 0, 0] = True
    t = p.copy()
    t[1, 1, 1] = True
    assert M.dice(p, p) == 1.0
    assert M.dice(p, t) == 2 / 3
    assert M.dice(p, ~p) == 0.0
    assert M.dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
    assert M.dice(np.zeros(3, bool), np.ones(3, bool)) == 0.0


def test_sensitivity_specificity_examples():
    t = np.array([1, 1, 1, 1, 0, 0], bool)
    p = np.array([1, 1, 1, 0, 0, 0], bool)
    assert M.sensitivity(p, t) == 0.75
    assert M.sensitivity(t, t) == 1.0 and M.specificity(~t, ~t) == 1.0
    allpos = np.ones(6, bool)
    assert M.sensitivity(allpos, t) == 1.0
    assert M.specificity(~allpos, ~t) == 0.0
    mv = M.sensitivity_value(p, np.zeros(6, bool))
    assert mv.value == 1.0 and mv.undefined


def test_hausdorff_examples():
    a = np.zeros((1, 1, 8), bool)
    b = a.copy()
    a[0, 0, 1] = True
    b[0, 0, 6] = True
    assert M.hausdorff95(a, b) == 5.0
    assert M.hausdorff95(a, a) == 0.0
    assert M.hausdorff95(a, b, spacing=(1, 1, 0.5)) == 2.5
    mv = M.hausdorff95_value(a, np.zeros_like(a))
    assert math.isnan(mv.value) and mv.undefined


def test_metrics_match_oracles_on_random_pairs():
    rng = np.random.default_rng(42)
    for k in range(100):
        p, t = random_pair(rng)
        spacing = (1.0, 1.0, 1.0) if k % 2 else tuple(rng.uniform(0.5, 2.0, 3))
        tp, np_, nt = counts_oracle(p, t)
        assert abs(M.dice(p, t) - 2 * tp / (np_ + nt)) <= 1e-9
        assert abs(M.sensitivity(p, t) - tp / nt) <= 1e-9
        tn = int((~p & ~t).sum())
        assert abs(M.specificity(~p, ~t) - tn / int((~t).sum())) <= 1e-9
        assert abs(M.hausdorff95(p, t, spacing) - hd95_oracle(p, t, spacing)) <= 1e-9
        assert abs(M.hausdorff95(p, t, spacing, directed=True)
                   - hd95_oracle(p, t, spacing, directed=True)) <= 1e-9


masks = arrays(bool, (4, 5, 6))


@given(masks, masks)
def test_symmetry_and_consistency(p, t):
    assert M.dice(p, t) == M.dice(t, p)
    if p.any() and t.any():
        assert M.hausdorff95(p, t) == M.hausdorff95(t, p)
    if t.any():
        lhs = M.dice(p, t)
        rhs = 2 * M.sensitivity(p, t) * t.sum() / (p.sum() + t.sum())
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        M.dice(np.zeros(3), np.zeros(4))
    with pytest.raises(DimensionError):
        M.hausdorff95(np.ones((2, 2)), np.ones((2, 2)), spacing=(1, 1, 1))


labels = arrays(np.uint8, (4, 5, 6), elements=st.sampled_from([0, 1, 2, 4]))


@given(labels)
def test_region_nesting(lab):
    r = M.RegionMasks.from_labels(lab)
    assert not (r.ET & ~r.TC).any() and not (r.TC & ~r.WT).any()


def _labels(rng):
    lab = np.zeros((8, 10, 10), np.uint8)
    lab[2:6, 2:8, 2:8] = 2
    lab[3:5, 3:7, 3:7] = 1
    lab[3:5, 4:6, 4:6] = 4
    return lab


def test_evaluate_perfect_case(rng):
    lab = _labels(rng)
    rep = M.evaluate_case(lab, lab, (1, 1, 1), "c0")
    for r in M.REGIONS:
        assert rep.values[r]["dice"] == 1.0 and rep.values[r]["hausdorff95"] == 0.0
        assert rep.values[r]["sensitivity"] == 1.0 and rep.values[r]["specificity"] == 1.0
    with pytest.raises(DimensionError):
        M.evaluate_case(lab, lab[:-1])


def test_evaluate_flags_missing_region(rng):
    lab = _labels(rng)
    pred = lab.copy()
    pred[pred == 4] = 1
    rep = M.evaluate_case(pred, lab)
    assert rep.values["ET"]["dice"] == 0.0
    assert "hausdorff95" in rep.undefined["ET"]


def _report(case_id, d):
    vals = {r: {"dice": d, "sensitivity": d, "specificity": 1.0, "hausdorff95": 2.0}
            for r in M.REGIONS}
    return M.MetricsReport(case_id, vals, {r: [] for r in M.REGIONS})


def test_aggregate_statistics():
    agg = M.aggregate([_report("a", 0.8), _report("b", 0.9)])
    s = agg["WT"]["dice"]
    assert s["mean"] == pytest.approx(0.85) and s["median"] == pytest.approx(0.85)
    assert s["stdev"] == pytest.approx(0.0707107, abs=1e-6)
    same = M.aggregate([_report("a", 0.7)] * 3)
    assert same["ET"]["dice"]["stdev"] == 0.0
    single = M.aggregate([_report("a", 0.7)])
    assert single["TC"]["dice"]["stdev"] == 0.0


def test_aggregate_skips_undefined_distance():
    r = _report("a", 0.5)
    r.values["ET"]["hausdorff95"] = math.nan
    agg = M.aggregate([r, _report("b", 0.5)])
    assert agg["ET"]["hausdorff95"]["n"] == 1


def test_json_and_csv_reports():
    reps = [_report("a", 0.8), _report("b", 0.9)]
    doc = json.loads(M.report_json(reps))
    assert [c["case_id"] for c in doc["cases"]] == ["a", "b"]
    assert doc["aggregate"]["WT"]["dice"]["mean"] == pytest.approx(0.85)
    rows = list(csv.reader(io.StringIO(M.report_csv(reps))))
    assert rows[0][1:4] == ["dice_ET", "dice_WT", "dice_TC"]
    assert [r[0] for r in rows[1:]] == ["a", "b", "Mean", "StdDev", "Median"]
    assert float(rows[3][1]) == pytest.approx(0.85)
