from .base import DatasetSplit, PatchTriple, PyramidImage, SlideGeometry
from .generator import generate_virtual_slide
from .geometry import GeometryError, ResolutionSpec
from .stitching import MissingTileError, stitch
from .tiling import extract_triples, slide_geometry, tile_origins

__all__ = [
    "DatasetSplit",
    "GeometryError",
    "MissingTileError",
    "PatchTriple",
    "PyramidImage",
    "ResolutionSpec",
    "SlideGeometry",
    "extract_triples",
    "generate_virtual_slide",
    "slide_geometry",
    "stitch",
    "tile_origins",
]
