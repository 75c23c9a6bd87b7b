import math

import torch
import torch.nn.functional as F


def relu(z, masks=None):
    if masks is not None:
        masks.append((z > 0).detach())
    return F.relu(z)


def upsample_to(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def upsample2x(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def center_crop(x, ratio):
    """Centered window of side ceil(H/ratio) x ceil(W/ratio) on an (N, C, H, W) tensor."""
    height, width = x.shape[-2:]
    ch = min(height, max(1, math.ceil(height / ratio)))
    cw = min(width, max(1, math.ceil(width / ratio)))
    y0 = (height - ch) // 2
    x0 = (width - cw) // 2
    return x[..., y0 : y0 + ch, x0 : x0 + cw]


def crop_and_upsample(x, ratio):
    """``up(crop(x))``: zoom into the central 1/ratio of the map, back to full size."""
    return upsample_to(center_crop(x, ratio), tuple(x.shape[-2:]))


def conv3x3(x, weight, bias=None):
    return F.conv2d(x, weight, bias, padding=1)


def conv1x1(x, weight, bias=None):
    return F.conv2d(x, weight, bias)
