"""Multi-label metrics: micro/macro F1, micro/macro ROC-AUC and precision@k."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricReport:
    macro_f1: float
    micro_f1: float
    macro_auc: float
    micro_auc: float
    precision_at_k: float
    k: int
    n_docs: int
    n_labels: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"shape mismatch: predictions {pred.shape}, truth {truth.shape}")
    return pred, truth


def f1_scores(pred, truth, threshold: float = 0.5) -> tuple[float, float]:
    """(micro, macro) F1 with predictions binarised as ``p >= threshold``."""
    pred, truth = _check(pred, truth)
    yhat = pred >= threshold
    tp = (yhat & truth).sum(axis=0).astype(np.float64)
    fp = (yhat & ~truth).sum(axis=0).astype(np.float64)
    fn = (~yhat & truth).sum(axis=0).astype(np.float64)
    denom = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = 2 * tp.sum() / denom if denom > 0 else 0.0
    per = np.divide(2 * tp, 2 * tp + fp + fn, out=np.zeros_like(tp), where=(2 * tp + fp + fn) > 0)
    macro = float(per.mean()) if per.size else 0.0
    return float(micro), macro


def _auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney rank statistic; tied scores contribute one half."""
    pos = labels.sum()
    neg = labels.size - pos
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def auc_scores(pred, truth) -> tuple[float, float]:
    """(micro, macro) ROC-AUC; labels lacking either class are skipped in the macro mean."""
    pred, truth = _check(pred, truth)
    per = []
    for j in range(pred.shape[1]):
        col = truth[:, j]
        if 0 < col.sum() < col.size:
            per.append(_auc(pred[:, j], col))
    if not per:
        raise ValueError("no label has both positive and negative examples; macro AUC undefined")
    flat = truth.ravel()
    micro = _auc(pred.ravel(), flat)
    return micro, float(np.mean(per))


def precision_at_k(pred, truth, k: int) -> float:
    pred, truth = _check(pred, truth)
    if k < 1 or k > pred.shape[1]:
        raise ValueError(f"k={k} out of range for {pred.shape[1]} labels")
    if pred.shape[0] == 0:
        return 0.0
    # stable sort on negated scores keeps ascending label index among ties
    top = np.argsort(-pred, axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(truth, top, axis=1)
    return float(hits.mean(axis=1).mean())


def evaluate(pred, truth, k: int = 8, threshold: float = 0.5,
             undefined_auc: str = "raise") -> MetricReport:
    """All metrics at once.  ``undefined_auc="nan"`` reports NaN instead of
    raising when no label has both classes (small cross-validation folds)."""
    pred, truth = _check(pred, truth)
    micro_f1, macro_f1 = f1_scores(pred, truth, threshold)
    try:
        micro_auc, macro_auc = auc_scores(pred, truth)
    except ValueError:
        if undefined_auc != "nan":
            raise
        micro_auc = macro_auc = float("nan")
    k = min(k, pred.shape[1])
    return MetricReport(macro_f1=macro_f1, micro_f1=micro_f1, macro_auc=macro_auc,
                        micro_auc=micro_auc, precision_at_k=precision_at_k(pred, truth, k),
                        k=k, n_docs=pred.shape[0], n_labels=pred.shape[1])
