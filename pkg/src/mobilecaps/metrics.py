"""Evaluation metrics and RALE severity mapping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

RALE_MIN, RALE_MAX = 1, 8
RALE_CATEGORIES = ("Mild", "Moderate", "Severe")


def rale_category(score: int) -> str:
    if not RALE_MIN <= score <= RALE_MAX:
        raise ValueError(f"RALE score must be in [1, 8], got {score}")
    if score <= 2:
        return "Mild"
    if score <= 5:
        return "Moderate"
    return "Severe"


def rale_to_severity(score: int) -> float:
    """Normalised regression target (score - 1) / 7."""
    rale_category(score)
    return (score - 1) / 7


def severity_to_rale(p: float) -> tuple[int, str]:
    """Map a head output in [0, 1] back to a RALE score and category."""
    if not 0 <= p <= 1 or not np.isfinite(p):
        raise ValueError(f"severity probability must lie in [0, 1], got {p}")
    score = min(max(round(1 + 7 * p), RALE_MIN), RALE_MAX)  # round() is half-to-even
    return score, rale_category(score)


def confusion_matrix(preds, truth, k: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if preds.shape != truth.shape:
        raise ValueError(f"preds {preds.shape} and truth {truth.shape} differ in length")
    if preds.size and (min(preds.min(), truth.min()) < 0 or max(preds.max(), truth.max()) >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    cm = np.zeros((k, k), dtype=int)
    np.add.at(cm, (truth, preds), 1)
    return cm


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, list[int]]:
    out = np.zeros(len(num), dtype=float)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out, [int(i) for i in np.flatnonzero(~nz)]


def precision_recall_f1(cm: np.ndarray) -> dict:
    """Per-class rates from a confusion matrix (rows = truth, cols = prediction).

    A zero denominator yields 0 and the class index is listed under
    ``zero_division``.
    """
    tp = np.diag(cm).astype(float)
    precision, p_zero = _safe_ratio(tp, cm.sum(axis=0).astype(float))
    recall, r_zero = _safe_ratio(tp, cm.sum(axis=1).astype(float))
    f1, f_zero = _safe_ratio(2 * precision * recall, precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1,
            "zero_division": {"precision": p_zero, "recall": r_zero, "f1": f_zero}}


def roc_auc_binary(scores, positive) -> float | None:
    """Rank-statistic AUC; None when only one class is present."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # midranks for ties
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_auc_ovr(scores, truth) -> list[float | None]:
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=int)
    return [roc_auc_binary(scores[:, k], truth == k) for k in range(scores.shape[1])]


def roc_curve(scores, positive) -> tuple[np.ndarray, np.ndarray]:
    """False/true positive rates at every distinct threshold, from (0,0) to (1,1)."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tpr = np.r_[0, tps[last]] / max(y.sum(), 1)
    fpr = np.r_[0, fps[last]] / max((~y).sum(), 1)
    return fpr, tpr


def r2_score(y_pred, y) -> float:
    y_pred = np.asarray(y_pred, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != y_pred.size:
        raise ValueError(f"length mismatch: {y_pred.size} vs {y.size}")
    if y.size < 2:
        raise ValueError("r2_score needs at least two samples")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ValueError("r2_score undefined for constant targets")
    return 1.0 - float(((y - y_pred) ** 2).sum()) / ss_tot


def _r6(x):
    if x is None:
        return None
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_r6(v) for v in x]
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return int(x)
    return round(float(x), 6)


@dataclass
class EvalReport:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    auc: list = field(default_factory=list)
    zero_division: dict = field(default_factory=dict)
    r2: float | None = None
    mae: float | None = None
    class_names: list[str] | None = None
    mean_accuracy: float | None = None   # set on fold averages; otherwise derived from the confusion

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        if self.mean_accuracy is not None:
            return self.mean_accuracy
        return float(np.trace(self.confusion) / self.n) if self.n else 0.0

    @property
    def macro(self) -> dict[str, float]:
        return {"precision": float(np.mean(self.precision)), "recall": float(np.mean(self.recall)),
                "f1": float(np.mean(self.f1))}

    def to_dict(self) -> dict:
        k = len(self.precision)
        return {
            "n": self.n,
            "num_classes": k,
            "class_names": list(self.class_names) if self.class_names else [str(i) for i in range(k)],
            "accuracy": _r6(self.accuracy),
            "confusion": self.confusion.astype(int).tolist(),
            "precision": _r6(self.precision),
            "recall": _r6(self.recall),
            "f1": _r6(self.f1),
            "macro": {key: _r6(v) for key, v in self.macro.items()},
            "auc": _r6(self.auc),
            "zero_division": self.zero_division,
            "r2": _r6(self.r2),
            "mae": _r6(self.mae),
            **({"averaged": True} if self.mean_accuracy is not None else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(confusion=np.asarray(d["confusion"], dtype=int),
                   precision=np.asarray(d["precision"], dtype=float),
                   recall=np.asarray(d["recall"], dtype=float),
                   f1=np.asarray(d["f1"], dtype=float),
                   auc=list(d.get("auc") or []), zero_division=d.get("zero_division") or {},
                   r2=d.get("r2"), mae=d.get("mae"), class_names=d.get("class_names"),
                   mean_accuracy=d.get("accuracy") if d.get("averaged") else None)


def confusion_and_prf(preds, truth, k: int, scores=None, class_names=None) -> EvalReport:
    cm = confusion_matrix(preds, truth, k)
    prf = precision_recall_f1(cm)
    auc = roc_auc_ovr(scores, truth) if scores is not None else []
    return EvalReport(cm, prf["precision"], prf["recall"], prf["f1"], auc,
                      prf["zero_division"], class_names=class_names)


def classification_report(scores, truth, class_names=None) -> EvalReport:
    scores = np.asarray(scores, dtype=float)
    return confusion_and_prf(scores.argmax(axis=1), truth, scores.shape[1], scores, class_names)


def severity_report(p_pred, rale_truth) -> EvalReport:
    """R^2 on the normalised target plus a Mild/Moderate/Severe confusion matrix."""
    p_pred = np.clip(np.asarray(p_pred, dtype=float).reshape(-1), 0, 1)
    rale_truth = np.asarray(rale_truth, dtype=int).reshape(-1)
    y = (rale_truth - 1) / 7
    cat_index = {c: i for i, c in enumerate(RALE_CATEGORIES)}
    pred_cat = [cat_index[severity_to_rale(p)[1]] for p in p_pred]
    true_cat = [cat_index[rale_category(int(r))] for r in rale_truth]
    rep = confusion_and_prf(pred_cat, true_cat, 3, class_names=list(RALE_CATEGORIES))
    rep.r2 = r2_score(p_pred, y) if y.size >= 2 and np.ptp(y) > 0 else None
    rep.mae = float(np.abs(p_pred * 7 - (rale_truth - 1)).mean()) if y.size else None
    return rep


def average_reports(reports: list[EvalReport]) -> EvalReport:
    """Unweighted per-fold mean of the rates; confusion matrices are summed."""
    if not reports:
        raise ValueError("no reports to average")

    def mean_or_none(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    k = len(reports[0].precision)
    auc = [mean_or_none([r.auc[i] if i < len(r.auc) else None for r in reports]) for i in range(k)] \
        if any(r.auc for r in reports) else []
    return EvalReport(
        confusion=np.sum([r.confusion for r in reports], axis=0),
        precision=np.mean([r.precision for r in reports], axis=0),
        recall=np.mean([r.recall for r in reports], axis=0),
        f1=np.mean([r.f1 for r in reports], axis=0),
        auc=auc,
        zero_division={},
        r2=mean_or_none([r.r2 for r in reports]),
        mae=mean_or_none([r.mae for r in reports]),
        class_names=reports[0].class_names,
        mean_accuracy=float(np.mean([r.accuracy for r in reports])),
    )
