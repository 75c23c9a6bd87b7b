import numpy as np
import torch
import torch.nn.functional as F

from .backbone import ShapeError


class LabelRangeError(ValueError):
    pass


def as_label_tensor(labels, device=None):
    if isinstance(labels, np.ndarray):
        labels = torch.from_numpy(labels.astype(np.int64))
    return labels.to(device=device, dtype=torch.long)


def cross_entropy(logits, labels, *, ignore_index=None, reduction="mean"):
    """Softmax cross-entropy over channels for (N, Nc, H, W) logits.

    Pixels labelled ``ignore_index`` (default ``Nc``) contribute nothing.
    ``reduction`` is "mean" over the non-ignored pixels of the whole batch,
    "per_sample" (one mean per sample, shape (N,)) or "sum".
    """
    n_classes = logits.shape[1]
    if ignore_index is None:
        ignore_index = n_classes
    labels = as_label_tensor(labels, logits.device)
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    valid = labels != ignore_index
    out_of_range = valid & ((labels < 0) | (labels >= n_classes))
    if out_of_range.any():
        bad = sorted({int(v) for v in labels[out_of_range].unique()})
        raise LabelRangeError(f"labels {bad} outside 0..{n_classes - 1} (ignore={ignore_index})")
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    log_probs = F.log_softmax(logits, dim=1)
    nll = -log_probs.gather(1, safe.unsqueeze(1)).squeeze(1)
    nll = nll * valid.to(nll.dtype)
    if reduction == "sum":
        return nll.sum()
    if reduction == "per_sample":
        counts = valid.flatten(1).sum(dim=1).clamp(min=1).to(nll.dtype)
        return nll.flatten(1).sum(dim=1) / counts
    if reduction == "mean":
        return nll.sum() / valid.sum().clamp(min=1).to(nll.dtype)
    raise ValueError(f"unknown reduction {reduction!r}")
