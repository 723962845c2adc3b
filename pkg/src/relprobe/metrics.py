"""Classification metrics for the three-class trend task.

All metrics are pure numpy functions of predicted class probabilities and
integer labels (0 = negative, 1 = neutral, 2 = positive).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

NUM_CLASSES = 3
NEUTRAL = 1
CLASS_NAMES = ("negative", "neutral", "positive")


@dataclass
class EvalBundle:
    accuracy: float
    macro_f1: float
    mcc: float
    auc: float
    confusion: np.ndarray  # [true, pred]
    n_samples: int

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "mcc": self.mcc,
            "auc": self.auc,
            "confusion": self.confusion.astype(int).tolist(),
            "n_samples": self.n_samples,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _average_ranks(scores):
    """Ranks starting at 1, ties get the midpoint rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _ovr_auc(scores, is_positive):
    """One-vs-rest AUC from ranks (Mann-Whitney; ties count half)."""
    n_pos = int(is_positive.sum())
    n_neg = len(is_positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    return (ranks[is_positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def multiclass_mcc(confusion):
    """Matthews correlation from the confusion matrix covariance form."""
    conf = np.asarray(confusion, dtype=np.float64)
    s = conf.sum()
    c = np.trace(conf)
    t = conf.sum(axis=1)  # true counts
    p = conf.sum(axis=0)  # predicted counts
    num = c * s - (t * p).sum()
    den = np.sqrt(s * s - (p * p).sum()) * np.sqrt(s * s - (t * t).sum())
    if den == 0.0:
        return 0.0
    return float(num / den)


def macro_f1_score(confusion):
    conf = np.asarray(confusion, dtype=np.float64)
    f1s = []
    for k in range(conf.shape[0]):
        tp = conf[k, k]
        fp = conf[:, k].sum() - tp
        fn = conf[k, :].sum() - tp
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0)
    return float(np.mean(f1s))


def evaluate(probs, labels):
    """Score predicted distributions against integer labels.

    Accuracy uses argmax with ties broken toward the lowest class index.
    AUC is the macro average of one-vs-rest AUCs; classes missing either
    positives or negatives are skipped (0.5 if none are scorable).
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[1] != NUM_CLASSES:
        raise ValueError(f"probs must be M x {NUM_CLASSES}, got {probs.shape}")
    if len(labels) != len(probs) or len(labels) == 0:
        raise ValueError("labels must be non-empty and match probs")
    bad = np.abs(probs.sum(axis=1) - 1.0) > 1e-4
    if bad.any():
        raise ValueError(f"probability row {int(np.argmax(bad))} does not sum to 1")

    preds = np.argmax(probs, axis=1)
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)

    aucs = []
    for k in range(NUM_CLASSES):
        auc_k = _ovr_auc(probs[:, k], labels == k)
        if auc_k is not None:
            aucs.append(auc_k)
    auc = float(np.mean(aucs)) if aucs else 0.5

    return EvalBundle(
        accuracy=float((preds == labels).mean()),
        macro_f1=macro_f1_score(confusion),
        mcc=multiclass_mcc(confusion),
        auc=auc,
        confusion=confusion,
        n_samples=len(labels),
    )


def majority_baseline(labels, eps=1e-6):
    """Score a constant predictor that always emits the neutral class."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("labels must be non-empty")
    probs = np.full((len(labels), NUM_CLASSES), eps)
    probs[:, NEUTRAL] = 1.0 - (NUM_CLASSES - 1) * eps
    return evaluate(probs, labels)
