"""Overlap and boundary metrics per tumour region, plus dataset aggregation."""

import csv
import dataclasses
import io
import json
import math
import statistics

import numpy as np
from scipy import ndimage

from .errors import DimensionError

REGIONS = ("WT", "TC", "ET")
CSV_REGIONS = ("ET", "WT", "TC")
METRICS = ("dice", "sensitivity", "specificity", "hausdorff95")


@dataclasses.dataclass(frozen=True)
class MetricValue:
    value: float
    undefined: bool = False


def _pair(pred, truth):
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    return p, t


def dice(pred, truth):
    p, t = _pair(pred, truth)
    np_, nt = int(p.sum()), int(t.sum())
    if np_ + nt == 0:
        return 1.0
    return int((p & t).sum()) / ((np_ + nt) / 2)


def sensitivity_value(pred, truth):
    """|P1 ∩ T1| / |T1| as a :class:`MetricValue`; empty truth gives 1.0 flagged undefined."""
    p, t = _pair(pred, truth)
    nt = int(t.sum())
    if nt == 0:
        return MetricValue(1.0, True)
    return MetricValue(int((p & t).sum()) / nt)


def specificity_value(pred_bg, truth_bg):
    """|P0 ∩ T0| / |T0| on the background masks; same empty convention as sensitivity."""
    return sensitivity_value(pred_bg, truth_bg)


def sensitivity(pred, truth):
    return sensitivity_value(pred, truth).value


def specificity(pred_bg, truth_bg):
    return specificity_value(pred_bg, truth_bg).value


def _directed(src, dst, spacing):
    # distances from every src voxel to the nearest dst voxel, on the joint bounding box
    box = np.argwhere(src | dst)
    lo, hi = box.min(axis=0), box.max(axis=0) + 1
    win = tuple(slice(a, b) for a, b in zip(lo, hi))
    field = ndimage.distance_transform_edt(~dst[win], sampling=spacing)
    return field[src[win]]


def hausdorff95_value(pred, truth, spacing=None, directed=False):
    """95th-percentile Hausdorff distance between voxel-centre sets.

    Symmetric by default: the larger of the two directed 95th percentiles.
    With ``directed`` only prediction-to-truth distances are used.  Undefined
    (nan, flagged) when either mask is empty.
    """
    p, t = _pair(pred, truth)
    spacing = tuple(float(s) for s in (spacing or (1.0,) * p.ndim))
    if len(spacing) != p.ndim:
        raise DimensionError(f"spacing {spacing} does not match {p.ndim}-D masks")
    if not p.any() or not t.any():
        return MetricValue(math.nan, True)
    d_pt = float(np.percentile(_directed(p, t, spacing), 95))
    if directed:
        return MetricValue(d_pt)
    d_tp = float(np.percentile(_directed(t, p, spacing), 95))
    return MetricValue(max(d_pt, d_tp))


def hausdorff95(pred, truth, spacing=None, directed=False):
    return hausdorff95_value(pred, truth, spacing, directed).value


@dataclasses.dataclass
class RegionMasks:
    WT: np.ndarray
    TC: np.ndarray
    ET: np.ndarray

    @classmethod
    def from_labels(cls, labels):
        labels = np.asarray(labels)
        return cls(np.isin(labels, (1, 2, 4)), np.isin(labels, (1, 4)), labels == 4)

    def region(self, name):
        return getattr(self, name)


@dataclasses.dataclass
class MetricsReport:
    case_id: str
    values: dict  # region -> metric -> float
    undefined: dict  # region -> list of metric names that hit an empty-set convention

    def to_dict(self):
        return {"case_id": self.case_id, "metrics": self.values,
                "undefined": {r: v for r, v in self.undefined.items() if v}}


def evaluate_case(pred, truth, spacing=None, case_id="", directed_hd=False):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"case {case_id}: prediction {pred.shape} vs truth {truth.shape}")
    pm, tm = RegionMasks.from_labels(pred), RegionMasks.from_labels(truth)
    values, undefined = {}, {}
    for r in REGIONS:
        p, t = pm.region(r), tm.region(r)
        sens = sensitivity_value(p, t)
        spc = specificity_value(~p, ~t)
        hd = hausdorff95_value(p, t, spacing, directed_hd)
        values[r] = {"dice": dice(p, t), "sensitivity": sens.value,
                     "specificity": spc.value, "hausdorff95": hd.value}
        undefined[r] = [name for name, mv in
                        (("sensitivity", sens), ("specificity", spc), ("hausdorff95", hd))
                        if mv.undefined]
    return MetricsReport(case_id, values, undefined)


def _summary(xs):
    xs = [x for x in xs if not math.isnan(x)]
    if not xs:
        return {"mean": math.nan, "median": math.nan, "stdev": math.nan, "n": 0}
    return {"mean": statistics.fmean(xs), "median": statistics.median(xs),
            "stdev": statistics.stdev(xs) if len(xs) > 1 else 0.0, "n": len(xs)}


def aggregate(reports):
    """Mean, median and sample standard deviation of every metric per region.

    Undefined Hausdorff values (nan) are left out of their summary; ``n``
    records how many cases contributed.
    """
    reports = list(reports)
    return {r: {m: _summary([rep.values[r][m] for rep in reports]) for m in METRICS}
            for r in REGIONS}


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def report_json(reports):
    reports = list(reports)
    doc = {"cases": [rep.to_dict() for rep in reports], "aggregate": aggregate(reports)}
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"


def report_csv(reports):
    """One row per case plus Mean/StdDev/Median rows; columns grouped by metric in ET, WT, TC order."""
    reports = list(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = [(m, r) for m in METRICS for r in CSV_REGIONS]
    w.writerow(["case"] + [f"{m}_{r}" for m, r in cols])

    def fmt(x):
        return "" if math.isnan(x) else repr(float(x))

    for rep in reports:
        w.writerow([rep.case_id] + [fmt(rep.values[r][m]) for m, r in cols])
    agg = aggregate(reports)
    for stat, name in (("mean", "Mean"), ("stdev", "StdDev"), ("median", "Median")):
        w.writerow([name] + [fmt(agg[r][m][stat]) for m, r in cols])
    return buf.getvalue()
