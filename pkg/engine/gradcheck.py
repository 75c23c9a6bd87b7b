"""Finite-difference oracle for the analytic gradients.

Loss closures take ``(weights, relu_masks)`` and return a scalar tensor; when
``relu_masks`` is a list, every ReLU appends its (z > 0) mask. Two evaluations
with equal mask lists lie on the same linear piece of the network, so a
central difference whose endpoints share the base pattern never straddles a
kink. When the pattern changes, the step is shrunk.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

DEFAULT_EPS = 1e-3
MIN_EPS = 1e-6
ERROR_FLOOR = 1e-8


@dataclass(frozen=True)
class CoordinateCheck:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    eps: float
    rel_err: float


@dataclass
class GradCheckReport:
    checks: list[CoordinateCheck] = field(default_factory=list)
    skipped_kinks: int = 0

    @property
    def max_rel_err(self):
        return max((c.rel_err for c in self.checks), default=0.0)

    def failures(self, rtol):
        return [c for c in self.checks if c.rel_err >= rtol]


def relative_error(analytic, numeric, floor=ERROR_FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _same_pattern(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


@torch.no_grad()
def _evaluate(loss_fn, weights):
    masks = []
    value = loss_fn(weights, masks)
    return float(value), masks


@torch.no_grad()
def central_difference(loss_fn, weights, name, index, eps):
    """Return ``(estimate, plus_pattern, minus_pattern)`` for one coordinate."""
    tensor = weights[name]
    original = tensor[index].item()
    tensor[index] = original + eps
    plus, plus_masks = _evaluate(loss_fn, weights)
    tensor[index] = original - eps
    minus, minus_masks = _evaluate(loss_fn, weights)
    tensor[index] = original
    return (plus - minus) / (2.0 * eps), plus_masks, minus_masks


def analytic_gradients(loss_fn, weights, names):
    leaves = dict(weights)
    for name in names:
        leaves[name] = weights[name].detach().clone().requires_grad_(True)
    loss = loss_fn(leaves, None)
    raw = torch.autograd.grad(loss, [leaves[name] for name in names], allow_unused=True)
    return {
        name: (torch.zeros_like(weights[name]) if g is None else g.detach())
        for name, g in zip(names, raw)
    }


def check_gradients(
    loss_fn,
    weights,
    *,
    names=None,
    n_coords=100,
    seed=0,
    eps=DEFAULT_EPS,
    rtol=1e-5,
    min_eps=MIN_EPS,
    max_attempts=None,
):
    """Compare autograd against central differences on sampled coordinates."""
    weights = {name: tensor.detach().clone() for name, tensor in weights.items()}
    names = list(names if names is not None else weights)
    analytic = analytic_gradients(loss_fn, weights, names)
    _, base_masks = _evaluate(loss_fn, weights)

    sizes = np.array([weights[name].numel() for name in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    attempts = 0
    max_attempts = max_attempts or n_coords * 4
    while len(report.checks) < n_coords and attempts < max_attempts:
        attempts += 1
        flat = int(rng.integers(offsets[-1]))
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[slot]
        index = tuple(int(i) for i in np.unravel_index(flat - offsets[slot], tuple(weights[name].shape)))
        a = float(analytic[name][index])
        best = None
        step = eps
        while step >= min_eps:
            numeric, plus_masks, minus_masks = central_difference(loss_fn, weights, name, index, step)
            if _same_pattern(plus_masks, base_masks) and _same_pattern(minus_masks, base_masks):
                err = relative_error(a, numeric)
                if best is None or err < best.rel_err:
                    best = CoordinateCheck(name, index, a, numeric, step, err)
                if err < rtol:
                    break
            step /= 10.0
        if best is None:
            report.skipped_kinks += 1
            continue
        report.checks.append(best)
    return report
