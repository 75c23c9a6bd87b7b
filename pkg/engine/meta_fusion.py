"""Meta fusion: negative head gradients in, fusion-convolution weights out.

The meta-learner is FC-ReLU-FC. Its input sigma concatenates the flattened
negative gradients of the segmentation loss with respect to the 1x1 output
heads of the X1 and X2 branches; its output is reshaped into the two
bias-free 3x3 fusion kernels W1 (2Nc -> Nc) and W2 (Nc -> Nc).
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbone import ShapeError
from .json_utils import log_event
from .losses import cross_entropy
from .params import ParameterStore, kaiming_normal
from .tensor_ops import conv1x1, conv3x3, crop_and_upsample, relu

DEFAULT_HIDDEN = 256
FC2_WEIGHT_SCALE = 0.01
HIDDEN_BIAS_INIT = 0.2
FUSION_PREFIX = "fusion."


@dataclass(frozen=True)
class MetaLearnerSpec:
    c_last: int
    n_classes: int
    hidden: int = DEFAULT_HIDDEN
    generate_biases: bool = False

    @property
    def d_in(self):
        return 2 * self.c_last * self.n_classes

    @property
    def w1_shape(self):
        return (self.n_classes, 2 * self.n_classes, 3, 3)

    @property
    def w2_shape(self):
        return (self.n_classes, self.n_classes, 3, 3)

    @property
    def n_w1(self):
        return 9 * 2 * self.n_classes * self.n_classes

    @property
    def n_w2(self):
        return 9 * self.n_classes * self.n_classes

    @property
    def d_out(self):
        extra = 2 * self.n_classes if self.generate_biases else 0
        return self.n_w1 + self.n_w2 + extra

    def expected_shapes(self):
        return {
            "fc1.weight": (self.hidden, self.d_in),
            "fc1.bias": (self.hidden,),
            "fc2.weight": (self.d_out, self.hidden),
            "fc2.bias": (self.d_out,),
        }


@dataclass(frozen=True)
class SigmaVector:
    values: torch.Tensor
    provenance: tuple = ()

    def __len__(self):
        return int(self.values.numel())


@dataclass(frozen=True)
class FusionWeights:
    w1: torch.Tensor
    w2: torch.Tensor
    b1: torch.Tensor | None = None
    b2: torch.Tensor | None = None

    @property
    def n_classes(self):
        return int(self.w2.shape[0])

    def as_tensors(self):
        tensors = {f"{FUSION_PREFIX}w1": self.w1, f"{FUSION_PREFIX}w2": self.w2}
        if self.b1 is not None:
            tensors[f"{FUSION_PREFIX}b1"] = self.b1
            tensors[f"{FUSION_PREFIX}b2"] = self.b2
        return tensors

    @classmethod
    def from_tensors(cls, tensors):
        return cls(
            w1=tensors[f"{FUSION_PREFIX}w1"],
            w2=tensors[f"{FUSION_PREFIX}w2"],
            b1=tensors.get(f"{FUSION_PREFIX}b1"),
            b2=tensors.get(f"{FUSION_PREFIX}b2"),
        )

    def detach(self):
        return FusionWeights(
            *(None if t is None else t.detach().clone() for t in (self.w1, self.w2, self.b1, self.b2))
        )


@dataclass(frozen=True)
class BranchOutput:
    """Logits of one non-meta branch with what sigma needs to differentiate its head."""

    logits: torch.Tensor
    features: torch.Tensor
    head_weight: torch.Tensor
    head_bias: torch.Tensor


def init_fusion_weights(n_classes, seed, *, dtype=torch.float32, with_bias=False):
    generator = torch.Generator().manual_seed(int(seed))
    w1 = kaiming_normal((n_classes, 2 * n_classes, 3, 3), 2 * n_classes * 9, generator, dtype=dtype)
    w2 = kaiming_normal((n_classes, n_classes, 3, 3), n_classes * 9, generator, dtype=dtype, gain=1.0)
    if not with_bias:
        return FusionWeights(w1, w2)
    return FusionWeights(w1, w2, torch.zeros(n_classes, dtype=dtype), torch.zeros(n_classes, dtype=dtype))


def init_plain_fusion(n_classes, seed, *, dtype=torch.float32, with_bias=False):
    """Trainable store holding the fusion kernels directly (no meta-learner)."""
    weights = init_fusion_weights(n_classes, seed, dtype=dtype, with_bias=with_bias)
    return ParameterStore(weights.as_tensors())


def init_meta_learner(spec, seed, *, dtype=torch.float32):
    """FC-ReLU-FC whose output starts at a Kaiming draw of the fusion kernels.

    fc2 weights are scaled down so the initial generated kernels are dominated
    by the fc2 bias. Hidden units start with a positive bias, so all of them are
    active at sigma = 0.
    """
    generator = torch.Generator().manual_seed(int(seed))
    store = ParameterStore()
    store.add("fc1.weight", kaiming_normal((spec.hidden, spec.d_in), spec.d_in, generator, dtype=dtype))
    store.add("fc1.bias", torch.full((spec.hidden,), HIDDEN_BIAS_INIT, dtype=dtype))
    fc2 = kaiming_normal((spec.d_out, spec.hidden), spec.hidden, generator, dtype=dtype, gain=1.0)
    store.add("fc2.weight", fc2 * FC2_WEIGHT_SCALE)
    base = init_fusion_weights(spec.n_classes, seed + 1, dtype=dtype, with_bias=spec.generate_biases)
    store.add("fc2.bias", torch.cat([t.reshape(-1) for t in base.as_tensors().values()]))
    return store


def check_meta_learner(ml, spec):
    expected = spec.expected_shapes()
    missing = sorted(set(expected) - set(ml))
    if missing:
        raise ShapeError(f"meta-learner is missing tensors {missing}")
    for name, shape in expected.items():
        if tuple(ml[name].shape) != shape:
            raise ShapeError(f"meta-learner {name} has shape {tuple(ml[name].shape)}, expected {shape}")
    return ml


def _sigma_values(sigma):
    return sigma.values if isinstance(sigma, SigmaVector) else sigma


def sigma_losses(out1, out2, y1, ratio, head_weights=None, *, ignore_index=None):
    """L(S1, Y1) and L(S2', Y1) as functions of the two head kernels.

    Features are detached; per-sample losses are averaged so batch gradients
    are the mean of the per-sample gradients.
    """
    w1, w2 = head_weights if head_weights is not None else (out1.head_weight, out2.head_weight)
    s1 = conv1x1(out1.features.detach(), w1, out1.head_bias.detach())
    s2 = conv1x1(out2.features.detach(), w2, out2.head_bias.detach())
    s2p = crop_and_upsample(s2, ratio)
    if s2p.shape[-2:] != s1.shape[-2:]:
        raise ShapeError(f"S2' side {tuple(s2p.shape[-2:])} does not match S1 side {tuple(s1.shape[-2:])}")
    loss1 = cross_entropy(s1, y1, ignore_index=ignore_index, reduction="per_sample").mean()
    loss2 = cross_entropy(s2p, y1, ignore_index=ignore_index, reduction="per_sample").mean()
    return loss1, loss2


def build_sigma(out1, out2, y1, ratio, *, ignore_index=None, provenance=()):
    """Negative gradients of the branch losses with respect to both 1x1 heads."""
    with torch.enable_grad():
        w1 = out1.head_weight.detach().clone().requires_grad_(True)
        w2 = out2.head_weight.detach().clone().requires_grad_(True)
        loss1, loss2 = sigma_losses(out1, out2, y1, ratio, (w1, w2), ignore_index=ignore_index)
        (g1,) = torch.autograd.grad(loss1, [w1])
        (g2,) = torch.autograd.grad(loss2, [w2])
    values = torch.cat([-g1.reshape(-1), -g2.reshape(-1)]).detach()
    if not torch.isfinite(values).all():
        raise ArithmeticError(f"non-finite sigma for {provenance}")
    return SigmaVector(values=values, provenance=tuple(provenance))


def generate_weights(ml, sigma, spec, *, relu_masks=None):
    values = _sigma_values(sigma)
    if values.ndim != 1 or values.numel() != spec.d_in:
        raise ShapeError(f"sigma has {values.numel()} values, meta-learner expects {spec.d_in}")
    hidden = relu(F.linear(values, ml["fc1.weight"], ml["fc1.bias"]), relu_masks)
    out = F.linear(hidden, ml["fc2.weight"], ml["fc2.bias"])
    if out.numel() != spec.d_out:
        raise ShapeError(f"meta-learner produced {out.numel()} values, expected {spec.d_out}")
    w1 = out[: spec.n_w1].reshape(spec.w1_shape)
    w2 = out[spec.n_w1 : spec.n_w1 + spec.n_w2].reshape(spec.w2_shape)
    if not spec.generate_biases:
        return FusionWeights(w1, w2)
    offset = spec.n_w1 + spec.n_w2
    b1 = out[offset : offset + spec.n_classes]
    b2 = out[offset + spec.n_classes :]
    return FusionWeights(w1, w2, b1, b2)


def fuse(s1, s2p, weights, *, relu_masks=None):
    """S = conv_W2(ReLU(conv_W1(cat(softmax(S1), softmax(S2'))))), 3x3 same padding."""
    n_classes = weights.n_classes
    if s1.shape[1] != n_classes or s2p.shape[1] != n_classes:
        raise ShapeError(
            f"fusion expects {n_classes} channels per branch, got {s1.shape[1]} and {s2p.shape[1]}"
        )
    if s1.shape != s2p.shape:
        raise ShapeError(f"S1 {tuple(s1.shape)} and S2' {tuple(s2p.shape)} differ")
    stacked = torch.cat([F.softmax(s1, dim=1), F.softmax(s2p, dim=1)], dim=1)
    hidden = relu(conv3x3(stacked, weights.w1, weights.b1), relu_masks)
    return conv3x3(hidden, weights.w2, weights.b2)


def finalize_inference_weights(ml, sigmas, spec):
    """Fusion weights for test time, generated from the mean sub-training sigma."""
    sigmas = list(sigmas)
    if not sigmas:
        raise ValueError("finalize_inference_weights needs at least one sub-training sigma")
    stacked = torch.stack([_sigma_values(s).detach() for s in sigmas])
    sigma_bar = SigmaVector(values=stacked.mean(dim=0), provenance=("mean", len(sigmas)))
    with torch.no_grad():
        weights = generate_weights(ml, sigma_bar, spec).detach()
    log_event(
        logging.INFO,
        "fusion_weights_finalized",
        batches=len(sigmas),
        sigma_norm=float(sigma_bar.values.norm()),
    )
    return weights, sigma_bar
