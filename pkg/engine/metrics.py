from dataclasses import dataclass

import numpy as np
import torch

from .backbone import ShapeError


@dataclass(frozen=True)
class IoUResult:
    miou: float
    per_class: dict[int, float]
    confusion: np.ndarray


def _as_array(labels):
    if isinstance(labels, torch.Tensor):
        return labels.detach().cpu().numpy()
    return np.asarray(labels)


def confusion_matrix(pred, truth, n_classes, ignore_index=None):
    """(n_classes, n_classes) counts, rows = truth, columns = prediction."""
    pred = _as_array(pred)
    truth = _as_array(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if ignore_index is None:
        ignore_index = n_classes
    keep = truth != ignore_index
    bad_pred = int((keep & ((pred < 0) | (pred >= n_classes))).sum())
    bad_truth = int((keep & ((truth < 0) | (truth >= n_classes))).sum())
    if bad_pred or bad_truth:
        raise ValueError(
            f"labels outside 0..{n_classes - 1}: {bad_pred} predicted, {bad_truth} true "
            f"(ignore_index {ignore_index})"
        )
    codes = truth[keep].astype(np.int64) * n_classes + pred[keep].astype(np.int64)
    return np.bincount(codes, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_from_confusion(confusion):
    confusion = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(confusion)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = {int(c): float(tp[c] / union[c]) for c in range(len(tp)) if union[c] > 0}
    value = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return IoUResult(miou=value, per_class=per_class, confusion=confusion)


def miou(pred, truth, n_classes, ignore_index=None):
    """Mean IoU over the classes present in the prediction or the truth."""
    return iou_from_confusion(confusion_matrix(pred, truth, n_classes, ignore_index))
