from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .base import PatchTriple, SlideGeometry
from .geometry import GeometryError

PATCH_ID_BITS = 20


def tile_origins(side, patch_size):
    """Row-major crop origins along one axis.

    Patches tile without overlap; when ``side`` is not a multiple of the patch
    size the last patch is shifted inward so it ends exactly at the border.
    """
    if side < patch_size:
        raise GeometryError(f"level side {side} is smaller than one patch ({patch_size})")
    origins = list(range(0, side - patch_size + 1, patch_size))
    if origins[-1] + patch_size < side:
        origins.append(side - patch_size)
    return origins


def make_patch_id(slide_index, tile_index):
    return (int(slide_index) << PATCH_ID_BITS) | int(tile_index)


def crop_centered(array, center, size, fill):
    """Crop a size×size window centered on ``center``; out-of-bounds is ``fill``.

    Returns the crop and a boolean mask of padded pixels.
    """
    half = size // 2
    cy, cx = center
    y0, x0 = cy - half, cx - half
    h, w = array.shape[:2]
    out = np.full((size, size) + array.shape[2:], fill, dtype=array.dtype)
    pad = np.ones((size, size), dtype=bool)
    sy0, sx0 = max(y0, 0), max(x0, 0)
    sy1, sx1 = min(y0 + size, h), min(x0 + size, w)
    if sy1 > sy0 and sx1 > sx0:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = array[sy0:sy1, sx0:sx1]
        pad[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = False
    return out, pad


def extract_triples(img, spec, *, slide_index=0):
    if tuple(img.factors) != tuple(spec.factors):
        raise GeometryError(f"pyramid factors {img.factors} do not match spec {spec.factors}")
    size = spec.patch_size
    top = img.levels[0]
    origins = tile_origins(top.shape[0], size)
    ignore = img.ignore_index
    triples = []
    tile_index = 0
    for oy in origins:
        for ox in origins:
            center = (oy + size // 2, ox + size // 2)
            crops = []
            for level, labels, scale in zip(img.levels, img.label_levels, img.level_scale):
                level_center = (int(np.floor(center[0] * scale)), int(np.floor(center[1] * scale)))
                x, pad = crop_centered(level, level_center, size, 0.0)
                y, _ = crop_centered(labels, level_center, size, ignore)
                crops.append((x, y, pad))
            (x1, y1, p1), (x2, y2, p2), (x3, y3, p3) = crops
            triples.append(
                PatchTriple(
                    patch_id=make_patch_id(slide_index, tile_index),
                    slide_id=img.slide_id,
                    origin=(oy, ox),
                    center=center,
                    x1=x1,
                    x2=x2,
                    x3=x3,
                    y1=y1,
                    y2=y2,
                    y3=y3,
                    padding_mask1=p1,
                    padding_mask2=p2,
                    padding_mask3=p3,
                )
            )
            tile_index += 1
    return triples


def slide_geometry(img, spec, *, slide_index=0):
    size = spec.patch_size
    side = img.levels[0].shape[0]
    origins = tile_origins(side, size)
    tiles = {}
    tile_index = 0
    for oy in origins:
        for ox in origins:
            tiles[make_patch_id(slide_index, tile_index)] = (oy, ox)
            tile_index += 1
    return SlideGeometry(slide_id=img.slide_id, side=side, patch_size=size, tiles=tiles)


def extract_triples_many(images, spec, *, workers=4):
    """Extract triples for several slides; result order follows ``images``."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [
            pool.submit(extract_triples, img, spec, slide_index=idx) for idx, img in enumerate(images)
        ]
        return [future.result() for future in futures]
