"""Small encoder-decoder segmentation network written as pure functions of a
ParameterStore.

Layer indices are stable: encoder blocks are 0..E-1 (conv3x3, ReLU, 2x average
pool), decoder blocks E..E+D-1 (2x bilinear upsample, conv3x3, ReLU) and the
1x1 head is L-1. The tapped output of a layer is its post-activation tensor.
"""

from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .params import ParameterStore, kaiming_normal
from .tensor_ops import conv1x1, conv3x3, relu, upsample2x


class ShapeError(ValueError):
    pass


class NonFiniteInputError(ValueError):
    pass


class NonFiniteLossError(ArithmeticError):
    def __init__(self, batch_id, value=None):
        super().__init__(f"non-finite loss ({value}) on batch {batch_id}")
        self.batch_id = batch_id
        self.value = value


@dataclass(frozen=True)
class BackboneConfig:
    n_classes: int
    base_channels: int = 16
    encoder_blocks: int = 3
    decoder_blocks: int = 3
    in_channels: int = 3

    def __post_init__(self):
        errors = validate_backbone(self)
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def n_layers(self):
        return self.encoder_blocks + self.decoder_blocks + 1

    @property
    def head_index(self):
        return self.n_layers - 1

    @property
    def c_last(self):
        return self.layer_channels(self.head_index - 1)

    def layer_kind(self, layer):
        if layer < self.encoder_blocks:
            return "encoder"
        if layer < self.encoder_blocks + self.decoder_blocks:
            return "decoder"
        if layer == self.head_index:
            return "head"
        raise IndexError(f"layer {layer} out of range 0..{self.head_index}")

    def layer_channels(self, layer):
        kind = self.layer_kind(layer)
        if kind == "encoder":
            return self.base_channels * 2**layer
        if kind == "decoder":
            j = layer - self.encoder_blocks
            return self.base_channels * 2 ** max(self.encoder_blocks - 2 - j, 0)
        return self.n_classes

    def layer_in_channels(self, layer):
        if layer == 0:
            return self.in_channels
        return self.layer_channels(layer - 1)

    def layer_kernel(self, layer):
        return 1 if layer == self.head_index else 3

    def layer_downscale(self, layer):
        """Spatial reduction of the layer output relative to the input patch."""
        kind = self.layer_kind(layer)
        if kind == "encoder":
            return 2 ** (layer + 1)
        if kind == "decoder":
            return 2 ** (self.encoder_blocks + self.decoder_blocks - layer - 1)
        return 1

    def tap_shape(self, layer, patch_size):
        side = patch_size // self.layer_downscale(layer)
        return (self.layer_channels(layer), side, side)

    @property
    def head_weight(self):
        return f"conv{self.head_index}.weight"

    @property
    def head_bias(self):
        return f"conv{self.head_index}.bias"


def validate_backbone(config):
    errors = []
    if config.n_classes < 2:
        errors.append("backbone.n_classes must be >= 2")
    if config.base_channels < 1:
        errors.append("backbone.base_channels must be >= 1")
    if config.encoder_blocks < 1:
        errors.append("backbone.encoder_blocks must be >= 1")
    if config.encoder_blocks != config.decoder_blocks:
        errors.append("backbone.encoder_blocks must equal backbone.decoder_blocks")
    return errors


@dataclass(frozen=True)
class LayerActivationStats:
    layer: int
    mean: float
    variance: float


def weight_name(layer):
    return f"conv{layer}.weight"


def bias_name(layer):
    return f"conv{layer}.bias"


def init_backbone(config, seed, *, dtype=torch.float32):
    """Kaiming fan-in initialisation, zero biases, every tensor trainable."""
    generator = torch.Generator().manual_seed(int(seed))
    store = ParameterStore()
    for layer in range(config.n_layers):
        c_in = config.layer_in_channels(layer)
        c_out = config.layer_channels(layer)
        k = config.layer_kernel(layer)
        fan_in = c_in * k * k
        gain = 1.0 if layer == config.head_index else 2.0
        store.add(weight_name(layer), kaiming_normal((c_out, c_in, k, k), fan_in, generator, dtype=dtype, gain=gain))
        store.add(bias_name(layer), torch.zeros(c_out, dtype=dtype))
    return store


def check_input(x, config, patch_size=None):
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) input, got shape {tuple(x.shape)}")
    if x.shape[1] != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} input channels, got {x.shape[1]}")
    height, width = x.shape[-2:]
    if patch_size is not None and (height, width) != (patch_size, patch_size):
        raise ShapeError(f"expected {patch_size}x{patch_size} patches, got {height}x{width}")
    step = 2**config.encoder_blocks
    if height % step or width % step:
        raise ShapeError(f"input side {height}x{width} must be divisible by {step}")
    if not torch.isfinite(x).all():
        raise NonFiniteInputError("input contains NaN or Inf")


def forward(params, x, config, taps=(), *, recall=None, relu_masks=None):
    """Run the backbone.

    ``recall`` maps a layer index to a callable ``stream -> stream`` that
    replaces the post-activation output of that layer. Returns
    ``(logits, tapped)`` with ``tapped`` keyed by layer index.
    """
    taps = set(taps)
    bad = [t for t in taps if not 0 <= t < config.n_layers]
    if bad:
        raise ShapeError(f"tap indices {bad} outside 0..{config.head_index}")
    check_input(x, config)
    recall = recall or {}
    tapped = OrderedDict()
    h = x
    for layer in range(config.n_layers - 1):
        weight = params[weight_name(layer)]
        bias = params[bias_name(layer)]
        if config.layer_kind(layer) == "encoder":
            h = relu(conv3x3(h, weight, bias), relu_masks)
            h = F.avg_pool2d(h, 2)
        else:
            h = relu(conv3x3(upsample2x(h), weight, bias), relu_masks)
        if layer in recall:
            h = recall[layer](h)
        if layer in taps:
            tapped[layer] = h
    logits = conv1x1(h, params[config.head_weight], params[config.head_bias])
    if config.head_index in taps:
        tapped[config.head_index] = logits
    return logits, tapped


def value_and_grad(params, loss_fn, batch, *, batch_id=None):
    """Evaluate ``loss_fn(weights, batch)`` and its exact gradient.

    Gradients are produced for the trainable tensors of ``params`` only;
    tensors the loss does not depend on get exact zeros.
    """
    weights = params.leaves()
    names = params.trainable_names()
    loss = loss_fn(weights, batch)
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(batch_id, float(loss.detach()))
    grads = OrderedDict()
    if not names:
        return loss.detach(), grads
    if loss.requires_grad:
        raw = torch.autograd.grad(loss, [weights[name] for name in names], allow_unused=True)
    else:
        raw = [None] * len(names)
    for name, g in zip(names, raw):
        grads[name] = torch.zeros_like(params[name]) if g is None else g.detach()
    return loss.detach(), grads


def grad(params, loss_fn, batch, *, batch_id=None):
    return value_and_grad(params, loss_fn, batch, batch_id=batch_id)[1]


@torch.no_grad()
def activation_stats(params, batch, config):
    if batch.shape[0] == 0:
        raise ValueError("activation_stats needs a nonempty batch")
    _, tapped = forward(params, batch, config, taps=range(config.n_layers))
    stats = []
    for layer in range(config.n_layers):
        values = tapped[layer].to(torch.float64)
        stats.append(
            LayerActivationStats(
                layer=layer,
                mean=float(values.mean()),
                variance=float(values.var(correction=0)),
            )
        )
    return stats


def head_params(params, config):
    return params[config.head_weight], params[config.head_bias]
