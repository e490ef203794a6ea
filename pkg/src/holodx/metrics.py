"""Binary diagnosis metrics: accuracy, sensitivity, specificity and rank AUC."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


@dataclass
class Metrics:
    acc: float
    auc: Optional[float]
    sen: float
    spe: float
    tp: int
    tn: int
    fp: int
    fn: int

    def as_dict(self):
        return {"ACC": self.acc, "AUC": self.auc, "SEN": self.sen, "SPE": self.spe,
                "TP": self.tp, "TN": self.tn, "FP": self.fp, "FN": self.fn}


def confusion(scores, labels, threshold=0.5):
    pred = np.asarray(scores) >= threshold
    y = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    return tp, tn, fp, fn


def auc_mann_whitney(scores, labels):
    """Probability a random positive outscores a random negative; ties count one half.

    Returns None when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # midranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _ratio(a, b):
    return a / b if b else float("nan")


def compute_metrics(scores, labels, threshold=0.5):
    tp, tn, fp, fn = confusion(scores, labels, threshold)
    total = tp + tn + fp + fn
    auc = auc_mann_whitney(scores, labels)
    if auc is None:
        log.warning("AUC undefined: evaluation split holds a single class")
    return Metrics(acc=_ratio(tp + tn, total), auc=auc, sen=_ratio(tp, tp + fn),
                   spe=_ratio(tn, tn + fp), tp=tp, tn=tn, fp=fp, fn=fn)
