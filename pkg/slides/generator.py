"""Procedural multi-resolution "virtual slides".

Each class region carries two cues: a smooth color field that survives heavy
downsampling and a fine stripe or dot pattern (period of a few base pixels)
that only the high magnification levels resolve.
"""

import logging

import numpy as np
from PIL import Image

from engine.json_utils import log_event
from .base import PyramidImage
from .geometry import GeometryError, check_base_side

CELLS_PER_CLASS = 3
COLOR_WEIGHT = 0.65
NOISE_WEIGHT = 0.20
PATTERN_AMPLITUDE = 0.30
PIXEL_NOISE_STD = 0.08
HUE_JITTER = 0.02
_ROW_CHUNK_ELEMENTS = 1 << 22


def generate_virtual_slide(seed, base_side, n_classes, spec, *, slide_id=None):
    if n_classes < 2:
        raise GeometryError("n_classes must be >= 2")
    check_base_side(base_side, spec)
    rng = np.random.default_rng(seed)

    n_cells = n_classes * CELLS_PER_CLASS
    sites = rng.uniform(0, base_side, size=(n_cells, 2))
    cell_class = rng.permutation(np.arange(n_cells) % n_classes)
    palette = _class_palette(rng, n_classes)
    patterns = [_pattern_params(rng, c, n_classes) for c in range(n_classes)]
    color_noise = _smooth_noise(rng, base_side)

    labels = np.empty((base_side, base_side), dtype=np.uint8)
    image = np.empty((base_side, base_side, 3), dtype=np.float32)
    rows_per_chunk = max(1, _ROW_CHUNK_ELEMENTS // (base_side * n_cells))
    cols = np.arange(base_side, dtype=np.float64)
    for r0 in range(0, base_side, rows_per_chunk):
        r1 = min(base_side, r0 + rows_per_chunk)
        rows = np.arange(r0, r1, dtype=np.float64)
        yy, xx = np.meshgrid(rows, cols, indexing="ij")
        dist = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
        chunk_labels = cell_class[np.argmin(dist, axis=-1)].astype(np.uint8)
        labels[r0:r1] = chunk_labels

        texture = np.zeros(chunk_labels.shape, dtype=np.float64)
        for c, params in enumerate(patterns):
            mask = chunk_labels == c
            if mask.any():
                texture[mask] = _render_pattern(params, yy[mask], xx[mask])
        color = palette[chunk_labels]
        chunk = (
            COLOR_WEIGHT * color
            + NOISE_WEIGHT * color_noise[r0:r1]
            + PATTERN_AMPLITUDE * (texture[..., None] - 0.5)
            + rng.normal(0.0, PIXEL_NOISE_STD, size=color.shape)
        )
        image[r0:r1] = np.clip(chunk, 0.0, 1.0)

    levels = []
    label_levels = []
    for factor in spec.factors:
        step = spec.top // factor
        levels.append(downsample_image(image, step))
        label_levels.append(downsample_labels(labels, step, n_classes))

    slide = PyramidImage(
        slide_id=slide_id or f"slide_{seed:04d}",
        seed=int(seed),
        n_classes=int(n_classes),
        factors=spec.factors,
        levels=tuple(levels),
        label_levels=tuple(label_levels),
        level_scale=tuple(f / spec.top for f in spec.factors),
    )
    log_event(
        logging.INFO,
        "virtual_slide_generated",
        slide_id=slide.slide_id,
        seed=seed,
        sides=[lvl.shape[0] for lvl in levels],
        class_counts=np.bincount(labels.ravel(), minlength=n_classes),
    )
    return slide


def downsample_image(image, step):
    if step == 1:
        return image.copy()
    side = image.shape[0] // step
    blocks = image.reshape(side, step, side, step, image.shape[-1])
    return blocks.mean(axis=(1, 3), dtype=np.float64).astype(np.float32)


def downsample_labels(labels, step, n_classes):
    """Majority vote per block; ties go to the lowest class index."""
    if step == 1:
        return labels.copy()
    side = labels.shape[0] // step
    counts = np.empty((n_classes, side, side), dtype=np.int64)
    for c in range(n_classes):
        counts[c] = (labels == c).reshape(side, step, side, step).sum(axis=(1, 3))
    return np.argmax(counts, axis=0).astype(np.uint8)


def _class_palette(rng, n_classes):
    # Class c sits at hue c / n_classes on every slide; slides only jitter it.
    jitter = rng.uniform(-HUE_JITTER, HUE_JITTER, size=n_classes)
    hues = (np.arange(n_classes) / n_classes + jitter) % 1.0
    palette = np.stack(
        [
            0.5 + 0.3 * np.cos(2 * np.pi * (hues + offset))
            for offset in (0.0, 1.0 / 3.0, 2.0 / 3.0)
        ],
        axis=-1,
    )
    return palette.astype(np.float64)


def _pattern_params(rng, class_index, n_classes):
    return {
        "kind": "dots" if class_index % 2 else "stripes",
        "angle": np.pi * class_index / n_classes + rng.uniform(-0.1, 0.1),
        "period": 3.0 + 2.0 * (class_index % 3),
        "phase": rng.uniform(0, 2 * np.pi),
    }


def _render_pattern(params, yy, xx):
    angle = params["angle"]
    period = params["period"]
    u = xx * np.cos(angle) + yy * np.sin(angle)
    wave_u = 0.5 + 0.5 * np.sin(2 * np.pi * u / period + params["phase"])
    if params["kind"] == "stripes":
        return wave_u
    v = -xx * np.sin(angle) + yy * np.cos(angle)
    wave_v = 0.5 + 0.5 * np.sin(2 * np.pi * v / period + params["phase"])
    return wave_u * wave_v


def _smooth_noise(rng, base_side, grid=6):
    field = np.empty((base_side, base_side, 3), dtype=np.float32)
    for ch in range(3):
        coarse = rng.uniform(-0.5, 0.5, size=(grid, grid)).astype(np.float32)
        resized = Image.fromarray(coarse).resize(
            (base_side, base_side), resample=Image.Resampling.BILINEAR
        )
        field[..., ch] = np.asarray(resized, dtype=np.float32)
    return field
