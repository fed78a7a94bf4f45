"""AUC, Logloss and relative AUC improvement."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

PROB_EPS = 1e-7


class MetricError(ValueError):
    pass


def auc(labels, scores) -> float:
    """Rank-sum AUC; tied scores share their average rank (a tie counts 1/2)."""
    y = np.asarray(labels).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined with a single class")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # average 1-based ranks over tie groups
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(labels, scores) -> float:
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(np.asarray(scores, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return float(np.mean(-(np.log(p) * y + np.log(1.0 - p) * (1.0 - y))))


def rela_imp(auc_measured: float, auc_base: float) -> float:
    """Percentage AUC gain over a base model, measured from the 0.5 chance level."""
    if auc_base <= 0.5:
        raise MetricError("base AUC must exceed 0.5")
    return ((auc_measured - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


@dataclass
class EvalReport:
    auc: float
    logloss: float
    n_samples: int
    n_positive: int
    rela_imp_pct: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(labels, scores, base: EvalReport | None = None) -> EvalReport:
    labels = np.asarray(labels)
    a = auc(labels, scores)
    rep = EvalReport(a, logloss(labels, scores), int(labels.size), int(labels.sum()))
    if base is not None:
        rep.rela_imp_pct = rela_imp(a, base.auc)
    return rep
