"""Binary-classification metrics: confusion counts and the F-score family.

The positive class is HATE (= 1).  All 0/0 ratios are defined as 0 so every
metric is total.  Macro F1 is the unweighted mean of the per-class F1 scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class EvalReport:
    confusion: Confusion
    hate: ClassScores
    not_hate: ClassScores
    macro_f1: float
    accuracy: float
    error: float


def _check_labels(golds: Sequence[int], preds: Sequence[int]) -> None:
    if len(golds) != len(preds):
        raise ValueError(f"length mismatch: {len(golds)} golds vs {len(preds)} preds")
    if len(golds) == 0:
        raise ValueError("cannot evaluate an empty label list")
    for name, seq in (("golds", golds), ("preds", preds)):
        for i, v in enumerate(seq):
            if v not in (0, 1):
                raise ValueError(f"{name}[{i}] must be 0 or 1, got {v!r}")


def confusion(golds: Sequence[int], preds: Sequence[int]) -> Confusion:
    """Standard confusion counts with HATE (= 1) as the positive class."""
    _check_labels(golds, preds)
    tp = fp = fn = tn = 0
    for g, p in zip(golds, preds):
        if g == 1 and p == 1:
            tp += 1
        elif g == 0 and p == 1:
            fp += 1
        elif g == 1 and p == 0:
            fn += 1
        else:
            tn += 1
    return Confusion(tp=tp, fp=fp, fn=fn, tn=tn)


def prf1(c: Confusion, positive: int = 1) -> tuple[float, float, float]:
    """Precision, recall, F1 for the given positive class (0/0 -> 0)."""
    if positive == 1:
        tp, fp, fn = c.tp, c.fp, c.fn
    elif positive == 0:
        tp, fp, fn = c.tn, c.fn, c.fp
    else:
        raise ValueError(f"positive class must be 0 or 1, got {positive!r}")
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def macro_f1(golds: Sequence[int], preds: Sequence[int]) -> float:
    c = confusion(golds, preds)
    return (prf1(c, positive=1)[2] + prf1(c, positive=0)[2]) / 2.0


def evaluate(golds: Sequence[int], preds: Sequence[int]) -> EvalReport:
    c = confusion(golds, preds)
    hp, hr, hf = prf1(c, positive=1)
    np_, nr, nf = prf1(c, positive=0)
    accuracy = (c.tp + c.tn) / c.total
    return EvalReport(
        confusion=c,
        hate=ClassScores(hp, hr, hf),
        not_hate=ClassScores(np_, nr, nf),
        macro_f1=(hf + nf) / 2.0,
        accuracy=accuracy,
        error=1.0 - accuracy,
    )


def report_json(report: EvalReport) -> str:
    """Single-object JSON rendering of an EvalReport."""
    obj = {
        "confusion": {
            "tp": report.confusion.tp,
            "fp": report.confusion.fp,
            "fn": report.confusion.fn,
            "tn": report.confusion.tn,
        },
        "hate": {
            "precision": report.hate.precision,
            "recall": report.hate.recall,
            "f1": report.hate.f1,
        },
        "not_hate": {
            "precision": report.not_hate.precision,
            "recall": report.not_hate.recall,
            "f1": report.not_hate.f1,
        },
        "macro_f1": report.macro_f1,
        "accuracy": report.accuracy,
        "error": report.error,
    }
    return json.dumps(obj, ensure_ascii=False)


def report_table(report: EvalReport) -> str:
    """Aligned plain-text rendering of an EvalReport."""
    c = report.confusion
    rows = [
        ("class", "precision", "recall", "f1"),
        ("HATE", f"{report.hate.precision:.4f}", f"{report.hate.recall:.4f}", f"{report.hate.f1:.4f}"),
        ("NOT", f"{report.not_hate.precision:.4f}", f"{report.not_hate.recall:.4f}", f"{report.not_hate.f1:.4f}"),
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
    lines.append(f"macro F1 {report.macro_f1:.4f}  accuracy {report.accuracy:.4f}  error {report.error:.4f}")
    lines.append(f"counts   tp={c.tp} fp={c.fp} fn={c.fn} tn={c.tn}")
    return "\n".join(lines)
