"""Training losses (cross-entropy + soft Dice) and the DSC evaluation metric.

Targets are plain integer numpy arrays of shape (N, H, W); logits are
Tensors of shape (N, K, H, W). Cross-entropy is a single fused graph node
(softmax folded into the backward pass); the soft Dice loss is composed from
differentiable primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor, make_result

DICE_EPS = 1e-5


def _check_target(logits: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if not np.issubdtype(target.dtype, np.integer):
        raise TypeError(f"target mask must be an integer array, got dtype {target.dtype}")
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {(n, h, w)}")
    lo, hi = int(target.min()), int(target.max())
    if lo < 0 or hi >= k:
        raise ValueError(f"target labels must lie in [0, {k}), found range [{lo}, {hi}]")
    return target


def one_hot(target: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer mask -> (N, K, H, W) one-hot planes."""
    eye = np.eye(num_classes, dtype=dtype)
    return np.ascontiguousarray(eye[target].transpose(0, 3, 1, 2))


def ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over all pixels of -log softmax(logits)[target]."""
    target = _check_target(logits, target)
    k = logits.shape[1]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    picked = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    loss = np.asarray(-picked.mean(), dtype=logits.dtype)

    def bwd(g):
        p = np.exp(logp)
        p -= one_hot(target, k, dtype=p.dtype)
        p *= g / picked.size
        return (p,)

    return make_result(loss, (logits,), bwd, "ce_loss")


def dice_loss(logits: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over all K classes of the soft Dice coefficient
    (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), sums over batch and pixels."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    target = _check_target(logits, target)
    k = logits.shape[1]
    p = ops.softmax_channel(logits)
    g = Tensor(one_hot(target, k, dtype=logits.dtype))
    inter = ops.sum_over(ops.mul(p, g), axes=(0, 2, 3))
    denom = ops.sum_over(p, axes=(0, 2, 3)) + ops.sum_over(g, axes=(0, 2, 3))
    dice = (inter * 2.0 + eps) / (denom + eps)
    return 1.0 - ops.mean_over_axis(dice, 0)


def combined_loss(logits: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Unit-weight sum of cross-entropy and soft Dice."""
    return ce_loss(logits, target) + dice_loss(logits, target, eps=eps)


# ---------------------------------------------------------------------------
# evaluation metric
# ---------------------------------------------------------------------------


@dataclass
class ClassReport:
    """Per-class Dice scores over an evaluation set.

    ``dsc`` maps class name to score for every foreground class with support;
    classes absent from both prediction and truth are listed in ``excluded``.
    ``support`` counts ground-truth pixels per class (all classes).
    ``aggregation`` records whether confusion counts were pooled over the
    dataset before scoring ("dataset") or scores were averaged per image
    ("image").
    """

    dsc: dict[str, float]
    mean_foreground: float
    support: dict[str, int]
    excluded: list[str] = field(default_factory=list)
    aggregation: str = "dataset"


def _confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """(K, K) matrix indexed [gt, pred]."""
    idx = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def _check_masks(pred: np.ndarray, gt: np.ndarray, num_classes: int):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if not np.issubdtype(m.dtype, np.integer):
            raise TypeError(f"{name} mask must be integer, got {m.dtype}")
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"{name} labels out of range [0, {num_classes})")
    return pred, gt


def default_class_names(num_classes: int) -> list[str]:
    return [f"class_{k}" for k in range(num_classes)]


def evaluate_dsc(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    class_names: list[str] | None = None,
    per_image: bool = False,
) -> ClassReport:
    """Foreground Dice (2*TP / (2*TP + FP + FN)) per class over a stack of
    integer masks of shape (N, H, W). Background (class 0) is never reported.
    """
    pred, gt = _check_masks(pred, gt, num_classes)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.ndim != 3:
        raise ValueError(f"masks must be (N, H, W) or (H, W), got {pred.shape}")
    names = class_names or default_class_names(num_classes)
    if len(names) != num_classes:
        raise ValueError(f"need {num_classes} class names, got {len(names)}")

    support_px = np.zeros(num_classes, dtype=np.int64)
    for img_gt in gt:
        support_px += np.bincount(img_gt.reshape(-1), minlength=num_classes)

    dsc: dict[str, float] = {}
    excluded: list[str] = []
    if per_image:
        sums = np.zeros(num_classes)
        contrib = np.zeros(num_classes, dtype=np.int64)
        for img_pred, img_gt in zip(pred, gt):
            cm = _confusion_counts(img_pred, img_gt, num_classes)
            tp = np.diag(cm)
            fn = cm.sum(axis=1) - tp
            fp = cm.sum(axis=0) - tp
            present = (tp + fn + fp) > 0
            score = np.zeros(num_classes)
            np.divide(2.0 * tp, 2.0 * tp + fp + fn, out=score, where=present)
            sums += np.where(present, score, 0.0)
            contrib += present
        for k in range(1, num_classes):
            if contrib[k]:
                dsc[names[k]] = float(sums[k] / contrib[k])
            else:
                excluded.append(names[k])
    else:
        cm = _confusion_counts(pred, gt, num_classes)
        tp = np.diag(cm)
        fn = cm.sum(axis=1) - tp
        fp = cm.sum(axis=0) - tp
        for k in range(1, num_classes):
            denom = 2 * tp[k] + fp[k] + fn[k]
            if denom == 0:
                excluded.append(names[k])
            else:
                dsc[names[k]] = float(2.0 * tp[k] / denom)

    mean_fg = float(np.mean(list(dsc.values()))) if dsc else 0.0
    support = {names[k]: int(support_px[k]) for k in range(num_classes)}
    return ClassReport(
        dsc=dsc,
        mean_foreground=mean_fg,
        support=support,
        excluded=excluded,
        aggregation="image" if per_image else "dataset",
    )
