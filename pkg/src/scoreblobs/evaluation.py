"""Confidence-swept evaluation reports.

Produces per-class precision/recall/F1 plus balanced accuracy at each
confidence threshold, together with the fraction of the test set retained.
Classes left with no ground-truth samples at a threshold carry a
"no data retained" marker (rendered as "-") and are excluded from that
level's balanced-accuracy mean.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

DEFAULT_LEVELS = (0.0, 0.25, 0.5, 0.75, 0.9)

AVERAGE_ROW = "__average__"


@dataclass
class ClassCell:
    """Metrics for one class at one confidence level.

    ``support`` counts ground-truth samples in the full set;
    ``retained_support`` counts those surviving the confidence filter. The
    metric fields are None exactly when retained_support is zero.
    """

    support: int
    retained_support: int
    precision: float | None
    recall: float | None
    f1: float | None

    def to_dict(self):
        return {
            "support": self.support,
            "retained_support": self.retained_support,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            support=int(d["support"]),
            retained_support=int(d["retained_support"]),
            precision=d["precision"],
            recall=d["recall"],
            f1=d["f1"],
        )


@dataclass
class Report:
    """Per-class metrics over one (possibly filtered) label set."""

    classes: list
    per_class: dict  # class -> ClassCell
    macro_precision: float | None
    macro_recall: float | None
    macro_f1: float | None
    balanced_accuracy: float | None
    n: int

    def to_dict(self):
        return {
            "classes": list(self.classes),
            "per_class": {str(c): self.per_class[c].to_dict() for c in self.classes},
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "balanced_accuracy": self.balanced_accuracy,
            "n": self.n,
        }


def _f1(p, r):
    return 2 * p * r / (p + r) if (p + r) > 0 else 0.0


def classification_report(y_true, y_pred, classes, full_support=None) -> Report:
    """Per-class precision/recall/F1 and balanced accuracy.

    Zero-denominator precision/recall are 0; balanced accuracy is the mean
    recall over classes with support > 0 (it equals the average recall).
    Macro averages run over the same support > 0 classes.
    """
    y_true = list(y_true)
    y_pred = list(y_pred)
    if len(y_true) != len(y_pred):
        raise DataError(f"label sequences differ in length: {len(y_true)} vs {len(y_pred)}")
    if not y_true and full_support is None:
        raise DataError("empty input to classification_report")
    known = set(classes)
    for lab in y_true + y_pred:
        if lab not in known:
            raise DataError(f"label {lab!r} not in class set")

    per_class = {}
    recalls, precisions, f1s = [], [], []
    for c in classes:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        support = tp + fn
        full = support if full_support is None else full_support.get(c, support)
        if support == 0:
            per_class[c] = ClassCell(support=full, retained_support=0, precision=None, recall=None, f1=None)
            continue
        precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        recall = tp / (tp + fn)
        per_class[c] = ClassCell(
            support=full, retained_support=support,
            precision=precision, recall=recall, f1=_f1(precision, recall),
        )
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(per_class[c].f1)

    if recalls:
        macro = (float(np.mean(precisions)), float(np.mean(recalls)), float(np.mean(f1s)))
        balanced = float(np.mean(recalls))
    else:
        macro = (None, None, None)
        balanced = None
    return Report(
        classes=list(classes),
        per_class=per_class,
        macro_precision=macro[0],
        macro_recall=macro[1],
        macro_f1=macro[2],
        balanced_accuracy=balanced,
        n=len(y_true),
    )


@dataclass
class LevelReport:
    level: float
    retained_count: int
    retained_fraction: float
    report: Report

    def to_dict(self):
        d = self.report.to_dict()
        d.update({
            "level": self.level,
            "retained_count": self.retained_count,
            "retained_fraction": self.retained_fraction,
        })
        return d


@dataclass
class ConfidenceSweepReport:
    levels: list  # of LevelReport
    classes: list
    class_names: dict = field(default_factory=dict)  # class -> display name

    def to_dict(self):
        return {
            "classes": list(self.classes),
            "class_names": {str(c): n for c, n in self.class_names.items()},
            "levels": [lv.to_dict() for lv in self.levels],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d):
        levels = []
        for lv in d["levels"]:
            classes = list(lv["classes"])
            per_class = {}
            for c in classes:
                per_class[c] = ClassCell.from_dict(lv["per_class"][str(c)])
            report = Report(
                classes=classes,
                per_class=per_class,
                macro_precision=lv["macro_precision"],
                macro_recall=lv["macro_recall"],
                macro_f1=lv["macro_f1"],
                balanced_accuracy=lv["balanced_accuracy"],
                n=int(lv["n"]),
            )
            levels.append(LevelReport(
                level=float(lv["level"]),
                retained_count=int(lv["retained_count"]),
                retained_fraction=float(lv["retained_fraction"]),
                report=report,
            ))
        classes = list(d["classes"])
        names = d.get("class_names", {})
        return cls(
            levels=levels,
            classes=classes,
            class_names={c: names[str(c)] for c in classes if str(c) in names},
        )

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))


def confidence_sweep(y_true, y_pred, confidences, classes, levels=DEFAULT_LEVELS,
                     class_names=None) -> ConfidenceSweepReport:
    """Re-evaluate keeping only predictions with confidence strictly above
    each level.

    Note the strict inequality: level 0 therefore drops predictions of
    exactly zero confidence (a perfectly uniform output).
    """
    y_true = list(y_true)
    y_pred = list(y_pred)
    confidences = [float(c) for c in confidences]
    if not (len(y_true) == len(y_pred) == len(confidences)):
        raise DataError("y_true, y_pred, confidences must have equal lengths")
    for c in confidences:
        if not (0.0 <= c <= 1.0):
            raise DataError(f"confidence {c} outside [0, 1]")
    total = len(y_true)
    if total == 0:
        raise DataError("empty input to confidence_sweep")
    full_support = {c: sum(1 for t in y_true if t == c) for c in classes}

    out = []
    for level in levels:
        keep = [i for i, c in enumerate(confidences) if c > level]
        rep = classification_report(
            [y_true[i] for i in keep], [y_pred[i] for i in keep], classes, full_support=full_support
        )
        out.append(LevelReport(
            level=float(level),
            retained_count=len(keep),
            retained_fraction=len(keep) / total,
            report=rep,
        ))
    return ConfidenceSweepReport(levels=out, classes=list(classes), class_names=dict(class_names or {}))


def _fmt(v, none="-"):
    return none if v is None else f"{v:.2f}"


def render_markdown(sweep: ConfidenceSweepReport, class_names=None) -> str:
    """Markdown table grouped by metric then confidence level, one row per
    class plus an average row; "-" marks cells with no retained data."""
    names = class_names or sweep.class_names or {c: str(c) for c in sweep.classes}
    levels = [lv.level for lv in sweep.levels]
    header = ["Class"]
    for metric in ("Precision", "Recall", "F1"):
        header.extend(f"{metric} @{int(round(l * 100))}%" for l in levels)
    lines = ["| " + " | ".join(header) + " |",
             "|" + "---|" * len(header)]
    for c in sweep.classes:
        row = [names.get(c, str(c))]
        for attr in ("precision", "recall", "f1"):
            for lv in sweep.levels:
                row.append(_fmt(getattr(lv.report.per_class[c], attr)))
        lines.append("| " + " | ".join(row) + " |")
    avg = ["*Average*"]
    for attr in ("macro_precision", "macro_recall", "macro_f1"):
        for lv in sweep.levels:
            avg.append(_fmt(getattr(lv.report, attr)))
    lines.append("| " + " | ".join(avg) + " |")
    footer = [
        "",
        "Balanced accuracy (mean per-class recall over classes with retained data): "
        + ", ".join(f"@{int(round(lv.level * 100))}%: {_fmt(lv.report.balanced_accuracy)}" for lv in sweep.levels),
        "Retained fraction: "
        + ", ".join(f"@{int(round(lv.level * 100))}%: {lv.retained_fraction:.3f}" for lv in sweep.levels),
        "",
    ]
    return "\n".join(lines + footer)


def render_csv(sweep: ConfidenceSweepReport, class_names=None) -> str:
    """Long-form CSV: per level, one row per class plus one average row."""
    names = class_names or sweep.class_names or {c: str(c) for c in sweep.classes}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "class", "precision", "recall", "f1", "support",
                "retained_support", "balanced_accuracy", "retained_fraction"])
    for lv in sweep.levels:
        for c in sweep.classes:
            cell = lv.report.per_class[c]
            w.writerow([
                lv.level, names.get(c, str(c)),
                _fmt(cell.precision, none="-"), _fmt(cell.recall, none="-"), _fmt(cell.f1, none="-"),
                cell.support, cell.retained_support, "", "",
            ])
        w.writerow([
            lv.level, AVERAGE_ROW,
            _fmt(lv.report.macro_precision, none="-"),
            _fmt(lv.report.macro_recall, none="-"),
            _fmt(lv.report.macro_f1, none="-"),
            lv.report.n, lv.retained_count,
            _fmt(lv.report.balanced_accuracy, none="-"),
            f"{lv.retained_fraction:.4f}",
        ])
    return buf.getvalue()


def plot_data(sweep: ConfidenceSweepReport) -> dict:
    """Threshold -> balanced accuracy and retained fraction, for plotting."""
    return {
        "levels": [lv.level for lv in sweep.levels],
        "balanced_accuracy": [lv.report.balanced_accuracy for lv in sweep.levels],
        "retained_fraction": [lv.retained_fraction for lv in sweep.levels],
    }


def emit_tables(sweep: ConfidenceSweepReport, out_dir, formats=("json", "csv", "markdown"),
                class_names=None, basename="sweep") -> list:
    """Write the report in the requested formats; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out_dir / f"{basename}.json"
        path.write_text(sweep.to_json())
        written.append(path)
    if "csv" in formats:
        path = out_dir / f"{basename}.csv"
        path.write_text(render_csv(sweep, class_names))
        written.append(path)
    if "markdown" in formats:
        path = out_dir / f"{basename}.md"
        path.write_text(render_markdown(sweep, class_names))
        written.append(path)
    path = out_dir / f"{basename}-plot.json"
    path.write_text(json.dumps(plot_data(sweep), sort_keys=True, indent=2) + "\n")
    written.append(path)
    return written


def baseline_reports(test_labels, classes, seed: int = 0, train_labels=None) -> dict:
    """Random-guess and constant (majority-of-train) predictor reports."""
    test_labels = list(test_labels)
    if not test_labels:
        raise DataError("empty test labels")
    pool = list(train_labels) if train_labels else test_labels
    counts = {c: pool.count(c) for c in classes}
    majority = max(classes, key=lambda c: (counts.get(c, 0), -classes.index(c)))
    constant_pred = [majority] * len(test_labels)

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(classes), size=len(test_labels))
    random_pred = [classes[i] for i in idx]

    return {
        "constant": classification_report(test_labels, constant_pred, classes),
        "random": classification_report(test_labels, random_pred, classes),
        "constant_class": majority,
    }
