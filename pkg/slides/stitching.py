import numpy as np


class MissingTileError(ValueError):
    """Raised when part of the slide is not covered by any prediction."""

    def __init__(self, message, *, region=None, missing_ids=None):
        super().__init__(message)
        self.region = region
        self.missing_ids = list(missing_ids or [])


def stitch(predictions, geometry, *, return_probabilities=False):
    """Average per-pixel class probabilities over covering tiles, then argmax.

    ``predictions`` is an iterable of ``(patch_id, probs)`` with ``probs`` shaped
    (n_classes, P, P). The output has the side of the top pyramid level.
    """
    size = geometry.patch_size
    side = geometry.side
    total = None
    counts = np.zeros((side, side), dtype=np.int32)
    seen = set()
    for patch_id, probs in predictions:
        if patch_id not in geometry.tiles:
            raise KeyError(f"patch_id {patch_id} does not belong to slide {geometry.slide_id}")
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 3 or probs.shape[1:] != (size, size):
            raise ValueError(f"prediction for patch {patch_id} has shape {probs.shape}")
        if total is None:
            total = np.zeros((probs.shape[0], side, side), dtype=np.float64)
        oy, ox = geometry.tiles[patch_id]
        total[:, oy : oy + size, ox : ox + size] += probs
        counts[oy : oy + size, ox : ox + size] += 1
        seen.add(patch_id)

    if total is None or (counts == 0).any():
        missing = sorted(set(geometry.tiles) - seen)
        uncovered = np.argwhere(counts == 0)
        y0, x0 = uncovered.min(axis=0)
        y1, x1 = uncovered.max(axis=0) + 1
        region = (int(y0), int(x0), int(y1), int(x1))
        raise MissingTileError(
            f"slide {geometry.slide_id}: uncovered region rows {region[0]}:{region[2]}, "
            f"cols {region[1]}:{region[3]} (missing patches {missing})",
            region=region,
            missing_ids=missing,
        )
    averaged = total / counts[None]
    label_map = np.argmax(averaged, axis=0).astype(np.uint8)
    if return_probabilities:
        return label_map, averaged
    return label_map


def one_hot(labels, n_classes):
    """(P, P) labels -> (n_classes, P, P) one-hot; out-of-range labels give all zeros."""
    labels = np.asarray(labels)
    out = np.zeros((n_classes,) + labels.shape, dtype=np.float32)
    for c in range(n_classes):
        out[c] = labels == c
    return out
