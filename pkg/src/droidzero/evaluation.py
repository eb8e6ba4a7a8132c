"""Confusion counts, detection metrics, per-family rates and threshold sweeps.

Malware is the positive class. A metric whose denominator is zero is
reported as ``None`` rather than 0 so fold averages are not skewed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .dataset import Manifest
from .errors import ValidationError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class Metrics:
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    fpr: Optional[float]


def _pairs(verdicts) -> List[Tuple[str, str]]:
    out = []
    for v in verdicts:
        if isinstance(v, tuple):
            out.append(v)
        else:
            out.append((v.app_id, v.label))
    return out


def confusion(verdicts, manifest: Manifest) -> ConfusionCounts:
    c = ConfusionCounts()
    for app_id, pred in _pairs(verdicts):
        entry = manifest.by_id.get(app_id)
        if entry is None:
            raise ValidationError(f"verdict for unknown app_id {app_id!r}")
        if entry.label not in ("benign", "malware"):
            raise ValidationError(f"app {app_id!r} has no definite label")
        if entry.label == "malware":
            if pred == "malware":
                c.tp += 1
            else:
                c.fn += 1
        elif pred == "malware":
            c.fp += 1
        else:
            c.tn += 1
    return c


def _ratio(num, den):
    return num / den if den else None


def metrics(counts: ConfusionCounts) -> Metrics:
    if counts.total == 0:
        raise ValidationError("no samples to score")
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return Metrics(
        accuracy=(counts.tp + counts.tn) / counts.total,
        precision=precision,
        recall=recall,
        f1=f1,
        fpr=_ratio(counts.fp, counts.fp + counts.tn),
    )


def average_metrics(folds: Sequence[Metrics]) -> Metrics:
    """Unweighted mean per metric over the folds where it is defined."""
    out = {}
    for name in ("accuracy", "precision", "recall", "f1", "fpr"):
        vals = [getattr(m, name) for m in folds if getattr(m, name) is not None]
        out[name] = sum(vals) / len(vals) if vals else None
    return Metrics(**out)


@dataclass
class FamilyRate:
    family: str
    detected: int
    total: int

    @property
    def rate(self):
        return self.detected / self.total if self.total else 0.0

    @property
    def undetected(self):
        return self.detected == 0


def per_family_detection(verdicts, manifest: Manifest) -> Dict[str, FamilyRate]:
    table: Dict[str, FamilyRate] = {}
    for app_id, pred in _pairs(verdicts):
        entry = manifest.by_id.get(app_id)
        if entry is None or entry.label != "malware":
            continue
        fam = entry.family or "<unknown>"
        row = table.setdefault(fam, FamilyRate(fam, 0, 0))
        row.total += 1
        row.detected += pred == "malware"
    return dict(sorted(table.items()))


@dataclass
class SweepPoint:
    threshold: float
    accuracy: float
    f1: Optional[float]
    benign_count: int


@dataclass
class SweepCurve:
    points: List[SweepPoint]
    best_threshold: Optional[float]


def threshold_sweep(scores: Sequence[float], labels: Sequence[str], grid: Sequence[float]) -> SweepCurve:
    """Re-apply the zero-shot rule (benign iff score > threshold) across a grid.

    ``best_threshold`` is the lowest threshold reaching the maximal F1.
    """
    grid = list(grid)
    if not grid:
        raise ValidationError("empty threshold grid")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValidationError("threshold grid must be strictly increasing")
    if grid[0] < 0 or grid[-1] > 1:
        raise ValidationError("thresholds must lie in [0, 1]")
    if len(scores) != len(labels):
        raise ValidationError("scores and labels differ in length")
    points = []
    for t in grid:
        c = ConfusionCounts()
        for s, y in zip(scores, labels):
            pred = "benign" if s > t else "malware"
            if y == "malware":
                c.tp += pred == "malware"
                c.fn += pred == "benign"
            else:
                c.fp += pred == "malware"
                c.tn += pred == "benign"
        m = metrics(c)
        points.append(SweepPoint(t, m.accuracy, m.f1, c.fn + c.tn))
    scored = [p for p in points if p.f1 is not None]
    best = max(scored, key=lambda p: (p.f1, -p.threshold)).threshold if scored else None
    return SweepCurve(points, best)


# ---------------------------------------------------------------------------
# reports


def _pct(x):
    return "   n/a" if x is None else f"{100 * x:6.2f}"


def build_report(sections: Dict[str, Tuple[ConfusionCounts, Metrics]],
                 families: Optional[Dict[str, FamilyRate]] = None, meta: Optional[dict] = None) -> dict:
    report = {"meta": meta or {}, "results": {}}
    for name, (counts, m) in sections.items():
        report["results"][name] = {"counts": asdict(counts), "metrics": asdict(m)}
    if families is not None:
        report["families"] = [
            {"family": f.family, "detected": f.detected, "total": f.total, "rate": f.rate,
             "undetected": f.undetected}
            for f in families.values()
        ]
    return report


def render_table(report: dict) -> str:
    lines = [f"{'model':<12} {'acc%':>6} {'prec%':>6} {'rec%':>6} {'f1%':>6} {'fpr%':>6}   tp   fp   tn   fn"]
    for name, res in report["results"].items():
        m, c = res["metrics"], res["counts"]
        lines.append(f"{name:<12} {_pct(m['accuracy'])} {_pct(m['precision'])} {_pct(m['recall'])} "
                     f"{_pct(m['f1'])} {_pct(m['fpr'])} {c['tp']:4d} {c['fp']:4d} {c['tn']:4d} {c['fn']:4d}")
    fams = report.get("families")
    if fams:
        lines.append("")
        lines.append(f"{'family':<24} {'detected':>8} {'total':>6} {'rate%':>6}")
        for f in fams:
            flag = "  undetected" if f["undetected"] else ""
            lines.append(f"{f['family']:<24} {f['detected']:8d} {f['total']:6d} {_pct(f['rate'])}{flag}")
    return "\n".join(lines) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def sweep_csv(curve: SweepCurve, metric: str) -> str:
    """Two-column CSV (threshold, value) for one metric of a sweep."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", metric])
    for p in curve.points:
        value = getattr(p, metric)
        w.writerow([repr(p.threshold), "" if value is None else repr(value)])
    return buf.getvalue()
