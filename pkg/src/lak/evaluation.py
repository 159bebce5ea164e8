"""Per-label precision/recall/F1 and macro averages."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def confusion_counts(pred, gold):
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    if pred.shape != gold.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gold {gold.shape}")
    tp = (pred & gold).sum(0)
    fp = (pred & ~gold).sum(0)
    fn = (~pred & gold).sum(0)
    return tp.astype(np.int64), fp.astype(np.int64), fn.astype(np.int64)


def _prf(tp, fp, fn):
    tp, fp, fn = (np.asarray(x, dtype=np.float64) for x in (tp, fp, fn))
    p = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    r = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=(tp + fn) > 0)
    f = np.divide(2 * p * r, p + r, out=np.zeros_like(tp), where=(p + r) > 0)
    return p, r, f


def per_label_f1(pred, gold, j: int):
    """(precision, recall, F1) of label column ``j``; empty ratios count as 0."""
    pred, gold = np.asarray(pred), np.asarray(gold)
    tp, fp, fn = confusion_counts(pred[:, j:j + 1], gold[:, j:j + 1])
    p, r, f = _prf(tp, fp, fn)
    return float(p[0]), float(r[0]), float(f[0])


@dataclass
class EvalReport:
    categories: List[str]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    threshold: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_mode: str = "all"

    def to_dict(self) -> Dict[str, object]:
        return {
            "threshold": self.threshold,
            "macro_mode": self.macro_mode,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "labels": {
                name: {"precision": float(self.precision[j]), "recall": float(self.recall[j]),
                       "f1": float(self.f1[j]), "tp": int(self.tp[j]), "fp": int(self.fp[j]),
                       "fn": int(self.fn[j])}
                for j, name in enumerate(self.categories)
            },
        }

    def to_tsv(self) -> str:
        lines = ["category\tprecision\trecall\tf1\ttp\tfp\tfn"]
        for j, name in enumerate(self.categories):
            lines.append(f"{name}\t{self.precision[j]:.6f}\t{self.recall[j]:.6f}\t{self.f1[j]:.6f}"
                         f"\t{self.tp[j]}\t{self.fp[j]}\t{self.fn[j]}")
        lines.append(f"MACRO\t{self.macro_precision:.6f}\t{self.macro_recall:.6f}\t{self.macro_f1:.6f}"
                     f"\t{int(self.tp.sum())}\t{int(self.fp.sum())}\t{int(self.fn.sum())}")
        return "\n".join(lines) + "\n"

    def write(self, stem: str) -> None:
        with open(stem + ".tsv", "w", encoding="utf-8") as handle:
            handle.write(self.to_tsv())
        with open(stem + ".json", "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")


def macro_scores(pred, gold, categories: Optional[Sequence[str]] = None, threshold: float = 0.5,
                 macro_mode: str = "all") -> EvalReport:
    """Unweighted means of per-label P/R/F1.

    ``macro_mode="skip-zero-support"`` averages only labels with gold positives.
    """
    pred, gold = np.asarray(pred), np.asarray(gold)
    tp, fp, fn = confusion_counts(pred, gold)
    p, r, f = _prf(tp, fp, fn)
    if macro_mode == "all":
        keep = np.ones_like(tp, dtype=bool)
    elif macro_mode == "skip-zero-support":
        keep = (tp + fn) > 0
    else:
        raise ValueError(f"unknown macro mode {macro_mode!r}")
    if categories is None:
        categories = [str(j) for j in range(gold.shape[1])]

    def mean(x):
        # fsum: correctly rounded, so the macro mean does not depend on label order
        return math.fsum(x[keep].tolist()) / int(keep.sum()) if keep.any() else 0.0

    return EvalReport(list(categories), p, r, f, tp, fp, fn, threshold, mean(p), mean(r), mean(f), macro_mode)


def evaluate_probabilities(probs, gold, categories=None, threshold: float = 0.5,
                           macro_mode: str = "all") -> EvalReport:
    return macro_scores(binarize(probs, threshold), gold, categories, threshold, macro_mode)


def align_gold(pred_ids: Sequence[str], gold: Mapping[str, Sequence[int]]) -> np.ndarray:
    """Gold matrix in prediction row order; raises listing ids without gold labels."""
    missing = [i for i in pred_ids if i not in gold]
    if missing:
        raise ValueError(f"{len(missing)} predicted ids have no gold labels: {missing[:20]}")
    return np.asarray([gold[i] for i in pred_ids], dtype=np.uint8)


def threshold_sweep(probs, gold, thresholds: Sequence[float] = tuple(np.round(np.arange(0.1, 0.91, 0.1), 2))):
    """Macro-F1 at each threshold; for analysis, headline numbers use 0.5."""
    return [(float(t), evaluate_probabilities(probs, gold, threshold=t).macro_f1) for t in thresholds]
