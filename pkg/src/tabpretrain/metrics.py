"""RMSE, accuracy, ROC-AUC and log-loss."""

from __future__ import annotations

import enum

import numpy as np
from scipy.special import expit, softmax
from scipy.stats import rankdata

from .data import TaskType

PROB_CLIP = 1e-15


class MetricKind(str, enum.Enum):
    RMSE = "rmse"
    ACCURACY = "accuracy"
    ROC_AUC = "roc_auc"
    LOGLOSS = "logloss"

    @property
    def higher_is_better(self) -> bool:
        return self in (MetricKind.ACCURACY, MetricKind.ROC_AUC)

    def better(self, a: float, b: float) -> bool:
        """True when `a` is strictly better than `b`."""
        return a > b if self.higher_is_better else a < b

    @property
    def worst(self) -> float:
        return -np.inf if self.higher_is_better else np.inf


def metric_for(task: TaskType, dataset_name: str = "") -> MetricKind:
    if task is TaskType.REGRESSION:
        return MetricKind.RMSE
    if task is TaskType.BINCLASS:
        return MetricKind.ROC_AUC
    if dataset_name.lower() in ("ot", "otto"):
        return MetricKind.LOGLOSS
    return MetricKind.ACCURACY


def _check(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} predictions vs {len(b)} targets")
    return a, b


def rmse(pred, y) -> float:
    pred, y = _check(pred, y)
    return float(np.sqrt(np.mean((pred.astype(float) - y.astype(float)) ** 2)))


def accuracy(scores, y) -> float:
    """`scores` are (n, k) logits/probabilities, or (n,) positive-class probabilities."""
    scores, y = _check(scores, y)
    labels = scores.argmax(axis=1) if scores.ndim == 2 else (scores > 0.5).astype(int)
    return float(np.mean(labels == y))


def logloss(probs, y) -> float:
    probs, y = _check(probs, y)
    y = y.astype(int)
    if probs.ndim == 1:
        probs = np.stack([1.0 - probs, probs], axis=1)
    p = np.clip(probs[np.arange(len(y)), y], PROB_CLIP, 1.0)
    return float(-np.mean(np.log(p)))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with average ranks for ties."""
    scores, labels = _check(scores, labels)
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def to_predictions(outputs: np.ndarray, task: TaskType, codec=None) -> np.ndarray:
    """Head outputs -> values in target units (regression) or class probabilities."""
    if task is TaskType.REGRESSION:
        return codec.decode(outputs) if codec is not None else outputs
    if task is TaskType.BINCLASS:
        return expit(outputs)
    return softmax(outputs, axis=1)


def score(kind: MetricKind, pred: np.ndarray, y: np.ndarray) -> float:
    """Score predictions from `to_predictions` against raw targets."""
    if kind is MetricKind.RMSE:
        return rmse(pred, y)
    if kind is MetricKind.ROC_AUC:
        return roc_auc(pred, y)
    if kind is MetricKind.LOGLOSS:
        return logloss(pred, y)
    return accuracy(pred, y)
