"""Checkpoint directories: one raw little-endian float32 file per tensor plus
``manifest.json`` (name -> shape, dtype, trainable flag, checksum, file, plus the
store order)."""

import hashlib
import logging
import os
import shutil

import numpy as np
import torch

from .json_utils import atomic_json_dump, load_json, log_event
from .params import ParameterStore

MANIFEST = "manifest.json"
_DTYPE = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


def _file_name(name):
    return name.replace("/", "_") + ".bin"


def save_store(store, directory, *, extra=None):
    """Write ``store`` (and optional extra named tensors) to ``directory``.

    The directory is assembled next to the target and swapped in at the end so
    a crash never leaves a half-written checkpoint behind.
    """
    parent = os.path.dirname(os.path.abspath(directory))
    os.makedirs(parent, exist_ok=True)
    tmp_dir = f"{directory}.tmp"
    if os.path.exists(tmp_dir):
        shutil.rmtree(tmp_dir)
    os.makedirs(tmp_dir)
    manifest = {"tensors": {}, "extra": {}, "order": list(store)}
    items = [(name, store[name], store.is_trainable(name), "tensors") for name in store]
    for name, tensor in (extra or {}).items():
        items.append((name, tensor, False, "extra"))
    for name, tensor, trainable, section in items:
        data = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype(_DTYPE)
        raw = data.tobytes()
        file_name = _file_name(name)
        with open(os.path.join(tmp_dir, file_name), "wb") as handle:
            handle.write(raw)
        manifest[section][name] = {
            "shape": list(data.shape),
            "dtype": "float32",
            "trainable": bool(trainable),
            "checksum": hashlib.sha256(raw).hexdigest(),
            "file": file_name,
        }
    atomic_json_dump(manifest, os.path.join(tmp_dir, MANIFEST))
    if os.path.exists(directory):
        shutil.rmtree(directory)
    os.replace(tmp_dir, directory)
    log_event(
        logging.INFO,
        "checkpoint_saved",
        path=directory,
        tensors=len(manifest["tensors"]),
        extra=sorted(manifest["extra"]),
    )
    return directory


def _read_entry(directory, name, entry, dtype):
    path = os.path.join(directory, entry["file"])
    with open(path, "rb") as handle:
        raw = handle.read()
    if hashlib.sha256(raw).hexdigest() != entry["checksum"]:
        raise CheckpointError(f"checksum mismatch for {name} in {directory}")
    array = np.frombuffer(raw, dtype=_DTYPE).reshape(entry["shape"])
    return torch.from_numpy(array.astype(np.float32)).to(dtype)


def load_store(directory, *, dtype=torch.float32):
    if not checkpoint_exists(directory):
        raise CheckpointError(f"no checkpoint at {directory}")
    manifest = load_json(os.path.join(directory, MANIFEST))
    store = ParameterStore()
    # The manifest itself is written with sorted keys; "order" keeps the store order.
    for name in manifest.get("order", list(manifest["tensors"])):
        entry = manifest["tensors"][name]
        store.add(name, _read_entry(directory, name, entry, dtype), trainable=entry["trainable"])
    return store


def load_extra(directory, name, *, dtype=torch.float32):
    manifest = load_json(os.path.join(directory, MANIFEST))
    entry = manifest.get("extra", {}).get(name)
    if entry is None:
        raise CheckpointError(f"{directory} has no extra tensor {name!r}")
    return _read_entry(directory, name, entry, dtype)


def checkpoint_exists(directory):
    return bool(directory) and os.path.exists(os.path.join(directory, MANIFEST))


def manifest_checksum(directory):
    """Digest over the per-tensor checksums recorded in the manifest."""
    manifest = load_json(os.path.join(directory, MANIFEST))
    digest = hashlib.sha256()
    for section in ("tensors", "extra"):
        for name in sorted(manifest.get(section, {})):
            digest.update(name.encode("utf-8"))
            digest.update(manifest[section][name]["checksum"].encode("utf-8"))
    return digest.hexdigest()


def combine_stores(stores):
    """One store holding several, tensor names prefixed with ``<key>.``."""
    combined = ParameterStore()
    for key, store in stores.items():
        for name in store:
            combined.add(f"{key}.{name}", store[name], trainable=store.is_trainable(name))
    return combined


def split_store(store, keys):
    parts = {}
    for key in keys:
        prefix = f"{key}."
        part = ParameterStore()
        for name in store:
            if name.startswith(prefix):
                part.add(name[len(prefix) :], store[name], trainable=store.is_trainable(name))
        parts[key] = part
    return parts


def extra_names(directory):
    manifest = load_json(os.path.join(directory, MANIFEST))
    return sorted(manifest.get("extra", {}))
