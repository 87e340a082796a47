"""Training losses (on the tape) and evaluation metrics (plain numpy)."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .config import LossConfig
from .tensor import Tensor

PROB_FLOOR = 1e-12
MAPE_GUARD = 1e-6


class UndefinedMetricError(ValueError):
    pass


def _picked(probs, labels) -> Tensor:
    probs = T.as_tensor(probs)
    labels = np.asarray(labels)
    C = probs.shape[-1]
    if np.any((labels < 0) | (labels >= C)) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"invalid label id(s) for {C} classes: {labels}")
    onehot = np.eye(C)[labels]
    return T.clamp_min(T.tsum(probs * onehot, axis=-1), PROB_FLOOR)


def cross_entropy(probs, label) -> Tensor:
    """-log p[label]; vectorized over leading axes."""
    return -T.log(_picked(probs, label))


def focal_loss(probs, label, cfg: LossConfig) -> Tensor:
    """-alpha[label] * (1 - p)^gamma * log p."""
    p = _picked(probs, label)
    C = T.as_tensor(probs).shape[-1]
    alpha = np.ones(C) if cfg.alpha is None else np.asarray(cfg.alpha)
    weight = alpha[np.asarray(label)]
    return -(weight * (1.0 - p) ** cfg.gamma) * T.log(p)


def masked_mse(pred, target, mask) -> Tensor:
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ValueError("no valid observations")
    target = np.where(mask > 0, np.asarray(target, dtype=np.float64), 0.0)
    diff = (T.as_tensor(pred) - target) * mask
    return T.tsum(diff * diff) * (1.0 / count)


def masked_mean(values, mask) -> Tensor:
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        return T.Tensor(0.0)
    return T.tsum(T.as_tensor(values) * mask) * (1.0 / count)


def total_loss(probs, labels, label_mask, score_pred, scores, score_mask,
               cfg: LossConfig, aux_probs=None) -> Tensor:
    """Mean focal loss + lambda_reg * masked MSE + lambda_ce * mean aux CE.

    ``probs`` (N, C) and ``score_pred`` (N, R) are flattened over visits;
    masks select observed entries. ``aux_probs`` shares ``labels``.
    """
    labels = np.asarray(labels)
    safe = np.where(np.asarray(label_mask) > 0, labels, 0)
    loss = masked_mean(focal_loss(probs, safe, cfg), label_mask)
    if cfg.lambda_reg and np.asarray(score_mask).sum() > 0:
        loss = loss + cfg.lambda_reg * masked_mse(score_pred, scores, score_mask)
    if aux_probs is not None and cfg.lambda_ce:
        loss = loss + cfg.lambda_ce * masked_mean(cross_entropy(aux_probs, safe), label_mask)
    return loss


def class_weights(labels, n_classes: int = 3) -> tuple[float, ...]:
    """Inverse class frequency normalized to mean 1 (absent classes get 1)."""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).astype(float)
    present = counts > 0
    inv = np.ones(n_classes)
    inv[present] = 1.0 / counts[present]
    inv[present] *= present.sum() / inv[present].sum()
    return tuple(float(x) for x in inv)


# ------------------------------------------------------------------- metrics

def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n1 = int(positive.sum())
    n0 = len(positive) - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUC needs both positives and negatives")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n1 * (n1 + 1) / 2.0
    return u / (n1 * n0)


def mauc(scores, labels) -> float:
    """Macro one-vs-rest AUC over the classes present in ``labels``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    present = np.unique(labels)
    if len(present) < 2:
        raise UndefinedMetricError("mAUC is undefined with fewer than two classes")
    return float(np.mean([binary_auc(scores[:, c], labels == c) for c in present]))


def precision_recall_f1(preds, labels) -> tuple[float, float, float]:
    preds, labels = np.asarray(preds), np.asarray(labels)
    ps, rs, fs = [], [], []
    for c in np.unique(labels):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return float(np.mean(ps)), float(np.mean(rs)), float(np.mean(fs))


def _included(target, mask, guard: float = 0.0):
    target = np.asarray(target, dtype=np.float64)
    keep = np.ones(target.shape, bool) if mask is None else np.asarray(mask).astype(bool)
    if guard:
        keep &= np.abs(target) >= guard
    if not keep.any():
        raise UndefinedMetricError("no cells left to score")
    return keep


def mape(pred, target, mask=None) -> float:
    keep = _included(target, mask, MAPE_GUARD)
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    return float(np.mean(np.abs((pred[keep] - target[keep]) / target[keep])))


def r2(pred, target, mask=None) -> float:
    keep = _included(target, mask)
    p, t = np.asarray(pred, dtype=np.float64)[keep], np.asarray(target, dtype=np.float64)[keep]
    sst = np.sum((t - t.mean()) ** 2)
    if sst == 0:
        raise UndefinedMetricError("R^2 is undefined for constant targets")
    return float(1.0 - np.sum((p - t) ** 2) / sst)
