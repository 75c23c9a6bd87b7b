from dataclasses import dataclass, field

import numpy as np

BRANCHES = ("x1", "x2", "x3")
SPLIT_NAMES = ("train", "subtrain", "test")


@dataclass(frozen=True)
class PyramidImage:
    """One virtual slide: an RGB image and a label map per magnification.

    ``levels[i]`` is (side_i, side_i, 3) float32 in [0, 1] and ``label_levels[i]``
    is (side_i, side_i) uint8, both ordered like ``factors`` (highest first).
    """

    slide_id: str
    seed: int
    n_classes: int
    factors: tuple[int, int, int]
    levels: tuple[np.ndarray, ...]
    label_levels: tuple[np.ndarray, ...]
    level_scale: tuple[float, ...]

    @property
    def ignore_index(self):
        return self.n_classes

    @property
    def base_side(self):
        return self.levels[0].shape[0]

    def level(self, factor):
        return self.levels[self.factors.index(factor)]

    def labels(self, factor):
        return self.label_levels[self.factors.index(factor)]


@dataclass(frozen=True)
class PatchTriple:
    """Center-aligned crops of one location at the three magnifications."""

    patch_id: int
    slide_id: str
    origin: tuple[int, int]
    center: tuple[int, int]
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    y3: np.ndarray
    padding_mask1: np.ndarray
    padding_mask2: np.ndarray
    padding_mask3: np.ndarray

    @property
    def images(self):
        return (self.x1, self.x2, self.x3)

    @property
    def labels(self):
        return (self.y1, self.y2, self.y3)

    @property
    def padding_masks(self):
        return (self.padding_mask1, self.padding_mask2, self.padding_mask3)

    def image(self, branch):
        return self.images[BRANCHES.index(branch)]

    def label(self, branch):
        return self.labels[BRANCHES.index(branch)]


@dataclass(frozen=True)
class SlideGeometry:
    """Where each X1 tile of a slide sits on the top pyramid level."""

    slide_id: str
    side: int
    patch_size: int
    tiles: dict[int, tuple[int, int]] = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetSplit:
    train: list[PatchTriple]
    subtrain: list[PatchTriple]
    test: list[PatchTriple]
    slide_assignment: dict[str, str]
    probe: list[PatchTriple] = field(default_factory=list)

    def slides_in(self, split_name):
        return sorted(slide for slide, name in self.slide_assignment.items() if name == split_name)

    def get(self, split_name):
        return getattr(self, split_name)
