"""Classification metrics: confusion matrix, per-class precision/recall/F1
with support, and macro/weighted aggregate rows."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


def round2(x):
    """Half-up rounding to 2 decimals (display convention)."""
    return math.floor(float(x) * 100.0 + 0.5) / 100.0


def f1_score(precision, recall):
    p, r = np.asarray(precision, dtype=np.float64), np.asarray(recall, dtype=np.float64)
    denom = p + r
    return np.where(denom > 0, 2.0 * p * r / np.where(denom > 0, denom, 1.0), 0.0)


@dataclass
class MetricsReport:
    classes: list
    support: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float
    macro: tuple       # (precision, recall, f1)
    weighted: tuple    # (precision, recall, f1)
    confusion: np.ndarray | None = None

    @staticmethod
    def from_confusion(classes, confusion):
        """Rows are true classes, columns predicted."""
        confusion = np.asarray(confusion, dtype=np.int64)
        k = len(classes)
        if confusion.shape != (k, k):
            raise ValueError(f"confusion shape {confusion.shape} != ({k},{k})")
        support = confusion.sum(axis=1)
        predicted = confusion.sum(axis=0)
        tp = np.diag(confusion).astype(np.float64)
        precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
        recall = np.where(support > 0, tp / np.maximum(support, 1), 0.0)
        f1 = f1_score(precision, recall)
        total = int(confusion.sum())
        accuracy = float(tp.sum() / total) if total else 0.0
        macro, weighted = _aggregate(precision, recall, f1, support)
        return MetricsReport(list(classes), support, precision, recall, f1,
                             accuracy, macro, weighted, confusion)

    @staticmethod
    def from_rows(classes, precisions, recalls, supports):
        """Aggregate externally supplied per-class rows. F1 is recomputed
        from the given precision/recall; accuracy equals weighted recall
        (the closed identity when every sample has one true class)."""
        precision = np.asarray(precisions, dtype=np.float64)
        recall = np.asarray(recalls, dtype=np.float64)
        support = np.asarray(supports, dtype=np.int64)
        f1 = f1_score(precision, recall)
        macro, weighted = _aggregate(precision, recall, f1, support)
        accuracy = weighted[1]
        return MetricsReport(list(classes), support, precision, recall, f1,
                             accuracy, macro, weighted, None)

    def total(self):
        return int(self.support.sum())


def _aggregate(precision, recall, f1, support):
    macro = (float(precision.mean()), float(recall.mean()), float(f1.mean()))
    total = support.sum()
    w = support / total if total else np.zeros_like(support, dtype=np.float64)
    weighted = (float((precision * w).sum()), float((recall * w).sum()),
                float((f1 * w).sum()))
    return macro, weighted


def render_table(report):
    """Human table: Class, Precision, Recall, F1-Score, Support, then
    Accuracy / Macro Avg. / Weighted Avg. rows (2-decimal display)."""
    name_w = max(14, max(len(c) for c in report.classes) + 2)
    head = f"{'Class':<{name_w}}{'Precision':>10}{'Recall':>10}{'F1-Score':>10}{'Support':>10}"
    lines = [head, "-" * len(head)]
    for i, cname in enumerate(report.classes):
        lines.append(
            f"{cname:<{name_w}}{round2(report.precision[i]):>10.2f}"
            f"{round2(report.recall[i]):>10.2f}{round2(report.f1[i]):>10.2f}"
            f"{int(report.support[i]):>10d}")
    lines.append("-" * len(head))
    total = report.total()
    lines.append(f"{'Accuracy':<{name_w}}{'':>10}{'':>10}{round2(report.accuracy):>10.2f}{total:>10d}")
    mp, mr, mf = report.macro
    lines.append(f"{'Macro Avg.':<{name_w}}{round2(mp):>10.2f}{round2(mr):>10.2f}{round2(mf):>10.2f}{total:>10d}")
    wp, wr, wf = report.weighted
    lines.append(f"{'Weighted Avg.':<{name_w}}{round2(wp):>10.2f}{round2(wr):>10.2f}{round2(wf):>10.2f}{total:>10d}")
    return "\n".join(lines) + "\n"


def report_to_json(report):
    """Machine-readable report, full precision."""
    payload = {
        "classes": list(report.classes),
        "support": [int(s) for s in report.support],
        "precision": [float(p) for p in report.precision],
        "recall": [float(r) for r in report.recall],
        "f1": [float(f) for f in report.f1],
        "accuracy": float(report.accuracy),
        "macro": {"precision": report.macro[0], "recall": report.macro[1],
                  "f1": report.macro[2]},
        "weighted": {"precision": report.weighted[0], "recall": report.weighted[1],
                     "f1": report.weighted[2]},
    }
    if report.confusion is not None:
        payload["confusion"] = report.confusion.tolist()
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def confusion_csv(report):
    """Confusion matrix CSV with class-name headers (rows true, cols predicted)."""
    if report.confusion is None:
        raise ValueError("report carries no confusion matrix")
    lines = ["true\\pred," + ",".join(report.classes)]
    for cname, row in zip(report.classes, report.confusion):
        lines.append(cname + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"
