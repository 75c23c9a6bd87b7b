import hashlib
import logging
import os

import numpy as np
from PIL import Image

from engine.json_utils import atomic_json_dump, load_json
from .base import SPLIT_NAMES, DatasetSplit, PyramidImage


def save_slide(img, directory):
    os.makedirs(directory, exist_ok=True)
    for factor, level, labels in zip(img.factors, img.levels, img.label_levels):
        rgb = np.clip(np.rint(level * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb).save(os.path.join(directory, f"level_{factor}.png"))
        Image.fromarray(labels.astype(np.uint8)).save(os.path.join(directory, f"labels_{factor}.png"))
    meta = {
        "slide_id": img.slide_id,
        "seed": img.seed,
        "n_classes": img.n_classes,
        "factors": list(img.factors),
        "sides": [int(level.shape[0]) for level in img.levels],
        "level_scale": list(img.level_scale),
    }
    atomic_json_dump(meta, os.path.join(directory, "meta.json"))
    return directory


def load_slide(directory):
    meta = load_json(os.path.join(directory, "meta.json"))
    levels = []
    label_levels = []
    for factor, side in zip(meta["factors"], meta["sides"]):
        with Image.open(os.path.join(directory, f"level_{factor}.png")) as handle:
            rgb = np.asarray(handle.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(os.path.join(directory, f"labels_{factor}.png")) as handle:
            labels = np.asarray(handle, dtype=np.uint8)
        if rgb.shape[:2] != (side, side) or labels.shape != (side, side):
            raise ValueError(f"slide {meta['slide_id']}: level {factor} does not match meta.json sides")
        levels.append(rgb)
        label_levels.append(labels)
    return PyramidImage(
        slide_id=meta["slide_id"],
        seed=int(meta["seed"]),
        n_classes=int(meta["n_classes"]),
        factors=tuple(int(f) for f in meta["factors"]),
        levels=tuple(levels),
        label_levels=tuple(label_levels),
        level_scale=tuple(float(s) for s in meta["level_scale"]),
    )


def list_slides(slides_dir):
    if not os.path.isdir(slides_dir):
        return []
    return sorted(
        name
        for name in os.listdir(slides_dir)
        if os.path.exists(os.path.join(slides_dir, name, "meta.json"))
    )


def slide_checksum(directory):
    digest = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".png"):
            continue
        digest.update(name.encode("utf-8"))
        with open(os.path.join(directory, name), "rb") as handle:
            digest.update(handle.read())
    return digest.hexdigest()


def assign_splits(slide_ids, counts, seed):
    """Randomly assign whole slides to train / subtrain / test."""
    slide_ids = sorted(slide_ids)
    if sum(counts) != len(slide_ids):
        raise ValueError(f"split counts {tuple(counts)} do not add up to {len(slide_ids)} slides")
    order = np.random.default_rng(seed).permutation(len(slide_ids))
    assignment = {}
    start = 0
    for name, count in zip(SPLIT_NAMES, counts):
        for idx in order[start : start + count]:
            assignment[slide_ids[idx]] = name
        start += count
    return dict(sorted(assignment.items()))


def save_splits(assignment, path):
    atomic_json_dump(assignment, path)


def load_splits(path):
    assignment = load_json(path)
    bad = {slide: name for slide, name in assignment.items() if name not in SPLIT_NAMES}
    if bad:
        raise ValueError(f"unknown split names in {path}: {bad}")
    return assignment


def build_dataset_split(triples_by_slide, assignment, *, probe_slides=0):
    """Group triples by split; the last ``probe_slides`` train slides become the probe."""
    groups = {name: [] for name in SPLIT_NAMES}
    probe = []
    train_slides = sorted(slide for slide, name in assignment.items() if name == "train")
    if probe_slides and len(train_slides) <= probe_slides:
        logging.warning("Probe split disabled: only %d training slides", len(train_slides))
        probe_slides = 0
    probe_ids = set(train_slides[len(train_slides) - probe_slides :]) if probe_slides else set()
    for slide_id in sorted(triples_by_slide):
        name = assignment.get(slide_id)
        if name is None:
            continue
        if slide_id in probe_ids:
            probe.extend(triples_by_slide[slide_id])
        else:
            groups[name].extend(triples_by_slide[slide_id])
    return DatasetSplit(
        train=groups["train"],
        subtrain=groups["subtrain"],
        test=groups["test"],
        slide_assignment=dict(assignment),
        probe=probe,
    )
