"""Score-based detection metrics and threshold-sweep curves.

Fake is the positive class (label 1). A record is called fake at threshold
``thr`` when ``score >= thr``. All counting is done in integers so results are
reproducible to the last bit; floating point enters only in the final ratio.
"""

from __future__ import annotations

import csv
import json
import math
from fractions import Fraction
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


_EXACT_AP_LIMIT = 20000


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    label: int
    score: float
    generator: str = "unknown"


class ScoreSet(list):
    """List of :class:`ScoreRecord` with array views.

    ``omitted`` lists ``(id, reason)`` for records that could not be scored.
    """

    omitted: list = []

    @classmethod
    def from_arrays(cls, labels, scores, ids=None, generators=None) -> "ScoreSet":
        labels = np.asarray(labels).astype(int)
        scores = np.asarray(scores, dtype=np.float64)
        if labels.shape != scores.shape:
            raise MetricError("labels and scores must have the same length")
        ids = ids if ids is not None else [f"{i:06d}" for i in range(len(labels))]
        gens = generators if generators is not None else ["unknown"] * len(labels)
        return cls(ScoreRecord(str(i), int(y), float(s), str(g))
                   for i, y, s, g in zip(ids, labels, scores, gens))

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self], dtype=int)

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self], dtype=np.float64)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self]


def write_scores(path, s: ScoreSet) -> None:
    """JSON-lines ``{id, label, score, generator}``, one record per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in s:
            fh.write(json.dumps({"id": r.id, "label": r.label, "score": r.score,
                                 "generator": r.generator}, sort_keys=True) + "\n")


def read_scores(path) -> ScoreSet:
    out = ScoreSet()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(ScoreRecord(d["id"], int(d["label"]), float(d["score"]), d.get("generator", "unknown")))
    return out


def _split(s: ScoreSet):
    if len(s) == 0:
        raise MetricError("empty score set")
    y, sc = s.labels, s.scores
    if not np.all(np.isin(y, (0, 1))):
        raise MetricError("labels must be 0 (real) or 1 (fake)")
    P, N = int(y.sum()), int(len(y) - y.sum())
    if P == 0 or N == 0:
        raise MetricError(f"need both labels present (fakes={P}, reals={N})")
    if not np.all(np.isfinite(sc)):
        raise MetricError("scores must be finite")
    return y, sc, P, N


def auroc(s: ScoreSet) -> float:
    """Probability a random fake outscores a random real, ties counted as one half."""
    y, sc, P, N = _split(s)
    ranks = rankdata(sc, method="average")
    # twice the Mann-Whitney U keeps the numerator an exact integer
    u2 = int(round(2 * ranks[y == 1].sum())) - P * (P + 1)
    return u2 / (2 * P * N)


def _threshold_counts(y, sc):
    """Distinct thresholds (descending) with (tp, fp) counts for ``score >= thr``."""
    order = np.argsort(-sc, kind="stable")
    s_sorted, y_sorted = sc[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    return s_sorted[last], tp[last].astype(np.int64), fp[last].astype(np.int64)


def average_precision(s: ScoreSet) -> float:
    """Step-interpolated area under the precision-recall curve.

    Records are ranked by descending score; equal scores are ordered by id
    (ascending), so every prefix adds exactly one record.
    """
    y, sc, P, N = _split(s)
    ids = np.array(s.ids, dtype=object)
    order = sorted(range(len(y)), key=lambda i: (-sc[i], ids[i]))
    hits = []
    tp = 0
    for k, i in enumerate(order, start=1):
        if y[i] == 1:
            tp += 1
            hits.append((tp, k))
    if len(hits) <= _EXACT_AP_LIMIT:
        return float(sum((Fraction(t, k) for t, k in hits), Fraction(0)) / P)
    return math.fsum(t / (k * P) for t, k in hits)


def acc_at_eer(s: ScoreSet) -> float:
    """Balanced accuracy at the observed-score threshold where FPR and FNR are closest.

    Ties in ``|FPR - FNR|`` go to the lower threshold.
    """
    y, sc, P, N = _split(s)
    thr, tp, fp = _threshold_counts(y, sc)
    fn = P - tp
    gap = np.abs(fp * P - fn * N)  # |FPR - FNR| scaled by P*N
    best = np.flatnonzero(gap == gap.min())[-1]  # thresholds descend, so last = lowest
    fpb, fnb = int(fp[best]), int(fn[best])
    return (2 * P * N - fpb * P - fnb * N) / (2 * P * N)


def fpr_at_recall(s: ScoreSet, recall_target: float = 0.8) -> float:
    """FPR on reals at the first threshold (sweeping downward) whose recall reaches the target."""
    if not 0.0 < recall_target <= 1.0:
        raise MetricError("recall_target must be in (0, 1]")
    y, sc, P, N = _split(s)
    thr, tp, fp = _threshold_counts(y, sc)
    ok = np.flatnonzero(tp >= recall_target * P - 1e-12)
    return fp[ok[0]] / N


def _curve_counts(s: ScoreSet):
    y, sc, P, N = _split(s)
    thr, tp, fp = _threshold_counts(y, sc)
    thr = np.r_[np.inf, thr, -np.inf]
    tp = np.r_[0, tp, P]
    fp = np.r_[0, fp, N]
    return thr, tp, fp, P, N


def roc_points(s: ScoreSet) -> np.ndarray:
    """Rows of (threshold, fpr, tpr) from +inf down to -inf."""
    thr, tp, fp, P, N = _curve_counts(s)
    return np.column_stack([thr, fp / N, tp / P])


def pr_points(s: ScoreSet) -> np.ndarray:
    """Rows of (threshold, recall, precision); precision is 1 where nothing is called fake."""
    thr, tp, fp, P, N = _curve_counts(s)
    called = tp + fp
    prec = np.where(called > 0, tp / np.maximum(called, 1), 1.0)
    return np.column_stack([thr, tp / P, prec])


def det_points(s: ScoreSet) -> np.ndarray:
    """Rows of (threshold, fpr, fnr) on linear axes."""
    thr, tp, fp, P, N = _curve_counts(s)
    return np.column_stack([thr, fp / N, (P - tp) / P])


def trapezoid_area(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    return math.fsum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2)


CURVE_HEADERS = {"roc": ("threshold", "fpr", "tpr"),
                 "pr": ("threshold", "recall", "precision"),
                 "det": ("threshold", "fpr", "fnr")}


def write_curve_csv(path, points: np.ndarray, kind: str) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADERS[kind])
        for row in points:
            w.writerow([_fmt(v) for v in row])


def read_curve_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.9g}"


def all_metrics(s: ScoreSet, recall_target: float = 0.8) -> dict:
    return {"auroc": auroc(s), "ap": average_precision(s), "acc_at_eer": acc_at_eer(s),
            "fpr_at_recall": fpr_at_recall(s, recall_target)}
