"""Weight-shared multi-resolution body: gap detection, the memory feature pool
and the memory recall adapters that patch the frozen meta-branch for the
higher magnifications."""

import logging
from dataclasses import dataclass
from types import MappingProxyType

import torch

from . import backbone
from .json_utils import atomic_json_dump, load_json, log_event
from .params import ParameterStore, kaiming_normal
from .tensor_ops import conv3x3, crop_and_upsample, relu

GAP_EPS = 1e-8
FALLBACK_LAYERS = 2


class StaleMemoryError(RuntimeError):
    def __init__(self, message, *, patch_ids=None):
        super().__init__(message)
        self.patch_ids = patch_ids


class UnfrozenMetaBranchError(RuntimeError):
    pass


@dataclass(frozen=True)
class GapProfile:
    branch: str
    scores: tuple[float, ...]
    tau: float
    gap_layers: tuple[int, ...]

    def to_dict(self):
        return {
            "branch": self.branch,
            "scores": list(self.scores),
            "tau": self.tau,
            "gap_layers": list(self.gap_layers),
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            branch=payload["branch"],
            scores=tuple(float(s) for s in payload["scores"]),
            tau=float(payload["tau"]),
            gap_layers=tuple(int(l) for l in payload["gap_layers"]),
        )

    def with_layers(self, layers):
        return GapProfile(self.branch, self.scores, self.tau, tuple(sorted(set(layers))))


class FeatureMemory:
    """Meta-features of one X3 pass, keyed by gap layer and scoped to its patches."""

    __slots__ = ("_scope", "_entries")

    def __init__(self, scope, entries):
        self._scope = tuple(int(p) for p in scope)
        self._entries = MappingProxyType({int(k): v.detach() for k, v in entries.items()})

    @property
    def scope(self):
        return self._scope

    @property
    def entries(self):
        return self._entries

    def layers(self):
        return tuple(sorted(self._entries))

    def recall(self, layer, patch_ids):
        patch_ids = tuple(int(p) for p in patch_ids)
        if patch_ids != self._scope:
            raise StaleMemoryError(
                f"memory recorded for patches {list(self._scope)} used with patches {list(patch_ids)}",
                patch_ids=patch_ids,
            )
        if layer not in self._entries:
            raise StaleMemoryError(
                f"memory for patches {list(patch_ids)} has no entry for gap layer {layer}",
                patch_ids=patch_ids,
            )
        return self._entries[layer]


def gap_score(mu_k, mu_3, var_k, var_3, eps=GAP_EPS):
    return abs(mu_k - mu_3) / (abs(mu_3) + eps) + abs(var_k - var_3) / (var_3 + eps)


def select_gap_layers(scores, tau, fallback=FALLBACK_LAYERS):
    chosen = tuple(l for l, s in enumerate(scores) if s > tau)
    if chosen:
        return chosen
    ranked = sorted(range(len(scores)), key=lambda l: (-scores[l], l))
    return tuple(sorted(ranked[:fallback]))


def detect_gaps(meta_params, calib_x3, calib_xk, tau, config, *, branch="x1"):
    if meta_params.trainable_names():
        raise UnfrozenMetaBranchError(
            "gap detection needs a trained, frozen meta-branch; trainable tensors: "
            f"{meta_params.trainable_names()}"
        )
    stats_3 = backbone.activation_stats(meta_params, calib_x3, config)
    stats_k = backbone.activation_stats(meta_params, calib_xk, config)
    scores = tuple(
        gap_score(sk.mean, s3.mean, sk.variance, s3.variance)
        for s3, sk in zip(stats_3[: config.head_index], stats_k[: config.head_index])
    )
    profile = GapProfile(branch=branch, scores=scores, tau=float(tau), gap_layers=select_gap_layers(scores, tau))
    log_event(
        logging.INFO,
        "gap_profile",
        branch=branch,
        tau=tau,
        scores=[round(s, 6) for s in scores],
        gap_layers=profile.gap_layers,
    )
    return profile


def non_gap_layers(profile, n_candidates):
    """Complement of the gap set, limited to the lowest-scoring layers."""
    others = [l for l in range(n_candidates) if l not in profile.gap_layers]
    if not others:
        return profile
    limit = max(1, len(profile.gap_layers))
    others = sorted(others, key=lambda l: (profile.scores[l], l))[:limit]
    return profile.with_layers(others)


def shared_profiles(profiles):
    union = sorted(set().union(*(p.gap_layers for p in profiles.values())))
    return {branch: p.with_layers(union) for branch, p in profiles.items()}


def save_profile(profile, path):
    atomic_json_dump(profile.to_dict(), path)


def load_profile(path):
    return GapProfile.from_dict(load_json(path))


def meta_forward(meta_params, x3, gaps, patch_ids, config):
    """Run X3 through the meta-branch and record its gap-layer features."""
    logits, tapped = backbone.forward(meta_params, x3, config, taps=set(gaps))
    memory = FeatureMemory(scope=patch_ids, entries={layer: tapped[layer] for layer in gaps})
    return logits, memory


def memrm_prefix(layer):
    return f"gap{layer}."


def init_memrm_params(config, gap_layers, seed, *, dtype=torch.float32):
    generator = torch.Generator().manual_seed(int(seed))
    store = ParameterStore()
    for layer in sorted(gap_layers):
        c = config.layer_channels(layer)
        prefix = memrm_prefix(layer)
        store.add(f"{prefix}conv_a.weight", kaiming_normal((c, 2 * c, 3, 3), 2 * c * 9, generator, dtype=dtype))
        store.add(f"{prefix}conv_a.bias", torch.zeros(c, dtype=dtype))
        store.add(f"{prefix}conv_b.weight", kaiming_normal((c, c, 3, 3), c * 9, generator, dtype=dtype, gain=1.0))
        store.add(f"{prefix}conv_b.bias", torch.zeros(c, dtype=dtype))
    return store


def memrm_layer_weights(weights, layer):
    prefix = memrm_prefix(layer)
    return {name[len(prefix) :]: t for name, t in weights.items() if name.startswith(prefix)}


def memrm_layers(weights):
    layers = set()
    for name in weights:
        if name.startswith("gap"):
            layers.add(int(name[3:].split(".", 1)[0]))
    return tuple(sorted(layers))


def mem_rm(a, b, ratio, weights, *, relu_masks=None):
    """B_hat = f(cat(B, up(crop(A)))) with f = conv_a, ReLU, conv_b."""
    if ratio <= 1:
        raise ValueError(f"memory recall ratio must be > 1, got {ratio}")
    if a.shape != b.shape:
        raise backbone.ShapeError(f"meta-feature shape {tuple(a.shape)} != stream shape {tuple(b.shape)}")
    recalled = crop_and_upsample(a, ratio)
    mixed = torch.cat([b, recalled], dim=1)
    hidden = relu(conv3x3(mixed, weights["conv_a.weight"], weights["conv_a.bias"]), relu_masks)
    return conv3x3(hidden, weights["conv_b.weight"], weights["conv_b.bias"])


def nonmeta_forward(
    meta_params,
    memrm_params,
    memory,
    xk,
    profile,
    ratio,
    patch_ids,
    config,
    *,
    taps=(),
    relu_masks=None,
):
    """Forward X1 or X2 through the frozen meta weights, recalling memory at gap layers."""
    recall = {}
    for layer in profile.gap_layers:
        stored = memory.recall(layer, patch_ids)
        layer_weights = memrm_layer_weights(memrm_params, layer)
        if not layer_weights:
            raise KeyError(f"no Mem-RM parameters for gap layer {layer} ({profile.branch})")

        def _recall(stream, _stored=stored, _weights=layer_weights):
            return mem_rm(_stored, stream, ratio, _weights, relu_masks=relu_masks)

        recall[layer] = _recall
    if not profile.gap_layers:
        # Scope is still enforced for an empty gap set.
        if tuple(int(p) for p in patch_ids) != memory.scope:
            raise StaleMemoryError(
                f"memory recorded for patches {list(memory.scope)} used with patches {list(patch_ids)}",
                patch_ids=tuple(patch_ids),
            )
    return backbone.forward(meta_params, xk, config, taps=taps, recall=recall, relu_masks=relu_masks)
