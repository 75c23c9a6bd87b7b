import hashlib
from collections import OrderedDict
from collections.abc import Mapping

import torch


class ParameterStore(Mapping):
    """Ordered name -> tensor mapping with a trainable flag per tensor.

    Networks in this package are pure functions of a mapping of tensors, so a
    store can be passed anywhere weights are expected.
    """

    def __init__(self, tensors=None, trainable=None):
        self._tensors = OrderedDict()
        self._trainable = {}
        for name, tensor in (tensors or {}).items():
            flag = True if trainable is None else bool(trainable.get(name, True))
            self.add(name, tensor, trainable=flag)

    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        return (
            f"ParameterStore({len(self)} tensors, {self.num_elements()} elements, "
            f"{len(self.trainable_names())} trainable)"
        )

    def add(self, name, tensor, *, trainable=True):
        if name in self._tensors:
            raise KeyError(f"tensor {name!r} already present")
        self._tensors[name] = tensor.detach().clone()
        self._trainable[name] = bool(trainable)
        return self

    def assign(self, name, tensor):
        current = self._tensors[name]
        if tuple(tensor.shape) != tuple(current.shape):
            raise ValueError(f"{name}: shape {tuple(tensor.shape)} != {tuple(current.shape)}")
        self._tensors[name] = tensor.detach().to(current.dtype).clone()

    def is_trainable(self, name):
        return self._trainable[name]

    def trainable_names(self):
        return [name for name in self._tensors if self._trainable[name]]

    def frozen_names(self):
        return [name for name in self._tensors if not self._trainable[name]]

    def freeze(self, names=None):
        for name in names if names is not None else list(self._tensors):
            self._trainable[name] = False
        return self

    def unfreeze(self, names=None):
        for name in names if names is not None else list(self._tensors):
            self._trainable[name] = True
        return self

    @property
    def dtype(self):
        for tensor in self._tensors.values():
            return tensor.dtype
        return torch.get_default_dtype()

    def num_elements(self, names=None, *, trainable_only=False):
        total = 0
        for name in names if names is not None else self._tensors:
            if trainable_only and not self._trainable[name]:
                continue
            total += self._tensors[name].numel()
        return total

    def checksum(self, names=None):
        digest = hashlib.sha256()
        for name in names if names is not None else self._tensors:
            tensor = self._tensors[name].detach().cpu().contiguous()
            digest.update(name.encode("utf-8"))
            digest.update(str(tensor.dtype).encode("utf-8"))
            digest.update(str(tuple(tensor.shape)).encode("utf-8"))
            digest.update(tensor.numpy().tobytes())
        return digest.hexdigest()

    def copy(self):
        return ParameterStore(self._tensors, self._trainable)

    def leaves(self):
        """Return a tensor mapping whose trainable entries are grad-enabled leaves."""
        weights = OrderedDict()
        for name, tensor in self._tensors.items():
            if self._trainable[name]:
                weights[name] = tensor.detach().clone().requires_grad_(True)
            else:
                weights[name] = tensor
        return weights


def kaiming_normal(shape, fan_in, generator, *, dtype=torch.float32, gain=2.0):
    std = (gain / max(1, fan_in)) ** 0.5
    return torch.randn(shape, generator=generator, dtype=dtype) * std
