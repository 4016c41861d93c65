"""Clustering quality: Hungarian-matched accuracy, NMI and macro F1."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import linear_sum_assignment

NMI_NORMALIZERS = ("arithmetic", "geometric", "min", "max")


@dataclass
class MetricsReport:
    acc: float
    nmi: float
    f1: float
    matching: dict[int, int] = field(default_factory=dict)
    confusion: np.ndarray | None = None

    def as_dict(self, decimals: int = 6) -> dict:
        return {"acc": round(self.acc, decimals), "nmi": round(self.nmi, decimals),
                "f1": round(self.f1, decimals)}


def _check(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred, truth = np.asarray(pred, dtype=np.int64), np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction length {pred.shape} does not match truth length {truth.shape}")
    return pred, truth


def contingency(pred, truth) -> np.ndarray:
    """Counts indexed [cluster, class]."""
    pred, truth = _check(pred, truth)
    kp = int(pred.max()) + 1 if pred.size else 0
    kt = int(truth.max()) + 1 if truth.size else 0
    c = np.zeros((kp, kt), dtype=np.int64)
    np.add.at(c, (pred, truth), 1)
    return c


def _pair_weights(pred, truth) -> np.ndarray:
    """Matching weight: agreement count first, then the pair's F1 contribution.

    Breaking agreement ties by macro F1 (which is separable over matched pairs)
    keeps F1 invariant to cluster relabeling; remaining ties go lexicographic.
    """
    w = contingency(pred, truth).astype(np.float64)
    sizes = w.sum(axis=1)[:, None] + w.sum(axis=0)[None, :]
    f1_part = np.divide(2 * w, sizes, out=np.zeros_like(w), where=sizes > 0)
    return w * (min(w.shape) + 1) + f1_part


def _feasible_total(w: np.ndarray, fixed: dict[int, int], skipped: set[int]) -> float:
    rows = [r for r in range(w.shape[0]) if r not in fixed and r not in skipped]
    cols = [c for c in range(w.shape[1]) if c not in fixed.values()]
    total = sum(float(w[r, c]) for r, c in fixed.items())
    if rows and cols:
        sub = w[np.ix_(rows, cols)]
        ri, ci = linear_sum_assignment(sub, maximize=True)
        total += float(sub[ri, ci].sum())
    return total


def hungarian_match(pred, truth) -> dict[int, int]:
    """Maximum-agreement cluster -> class map.

    Among optimal maps the one with the highest macro F1 wins, then the
    lexicographically smallest.
    """
    pred, truth = _check(pred, truth)
    if pred.size == 0:
        return {}
    w = _pair_weights(pred, truth)
    best = _feasible_total(w, {}, set())
    tol = 1e-9 * max(1.0, best)
    fixed: dict[int, int] = {}
    skipped: set[int] = set()
    # fix clusters in order, each to the smallest class that keeps the optimum reachable
    for r in range(w.shape[0]):
        for c in range(w.shape[1]):
            if c in fixed.values():
                continue
            if _feasible_total(w, {**fixed, r: c}, skipped) >= best - tol:
                fixed[r] = c
                break
        else:
            skipped.add(r)
    return fixed


def matched_confusion(pred, truth, matching: dict[int, int]) -> np.ndarray:
    """K x K confusion [class, matched class]; unmatched clusters land in no column."""
    pred, truth = _check(pred, truth)
    k = max(int(truth.max()) + 1 if truth.size else 0, int(pred.max()) + 1 if pred.size else 0)
    conf = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(pred, truth):
        if int(p) in matching:
            conf[t, matching[int(p)]] += 1
    return conf


def accuracy(pred, truth, matching: dict[int, int] | None = None) -> float:
    pred, truth = _check(pred, truth)
    if pred.size == 0:
        return 0.0
    matching = hungarian_match(pred, truth) if matching is None else matching
    mapped = np.array([matching.get(int(p), -1) for p in pred])
    return float((mapped == truth).mean())


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth, normalizer: str = "arithmetic") -> float:
    if normalizer not in NMI_NORMALIZERS:
        raise ValueError(f"normalizer must be one of {NMI_NORMALIZERS}")
    c = contingency(pred, truth).astype(np.float64)
    n = c.sum()
    if n == 0:
        return 0.0
    hp, ht = _entropy(c.sum(axis=1)), _entropy(c.sum(axis=0))
    if hp == 0.0 and ht == 0.0:
        return 1.0
    if hp == 0.0 or ht == 0.0:
        return 0.0
    pij = c / n
    outer = np.outer(c.sum(axis=1), c.sum(axis=0)) / (n * n)
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    denom = {"arithmetic": (hp + ht) / 2.0, "geometric": np.sqrt(hp * ht),
             "min": min(hp, ht), "max": max(hp, ht)}[normalizer]
    return float(min(max(mi / denom, 0.0), 1.0))


def macro_f1(pred, truth, matching: dict[int, int] | None = None) -> float:
    pred, truth = _check(pred, truth)
    matching = hungarian_match(pred, truth) if matching is None else matching
    mapped = np.array([matching.get(int(p), -1) for p in pred])
    classes = np.unique(truth)
    if not len(classes):
        return 0.0
    # exact rational mean, rounded once, so the value is independent of summation order
    total = Fraction(0)
    for cls in classes:
        tp = int(((mapped == cls) & (truth == cls)).sum())
        if tp:
            total += Fraction(2 * tp, int((mapped == cls).sum()) + int((truth == cls).sum()))
    return float(total / len(classes))


def evaluate(pred, truth, normalizer: str = "arithmetic") -> MetricsReport:
    matching = hungarian_match(pred, truth)
    return MetricsReport(
        acc=accuracy(pred, truth, matching),
        nmi=nmi(pred, truth, normalizer),
        f1=macro_f1(pred, truth, matching),
        matching=matching,
        confusion=matched_confusion(pred, truth, matching),
    )
