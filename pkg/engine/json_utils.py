import json
import logging
import os

import numpy as np
import torch


def sanitize_for_json(value):
    if isinstance(value, dict):
        return {str(key): sanitize_for_json(val) for key, val in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize_for_json(item) for item in value]
    if isinstance(value, (set, frozenset)):
        return [sanitize_for_json(item) for item in sorted(value)]
    if isinstance(value, bytes):
        return value.decode("utf-8", errors="replace")
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return sanitize_for_json(value.tolist())
    if isinstance(value, torch.Tensor):
        return sanitize_for_json(value.detach().cpu().tolist())
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    return str(value)


def safe_json_dumps(value, **kwargs):
    kwargs.setdefault("default", str)
    try:
        return json.dumps(sanitize_for_json(value), **kwargs)
    except TypeError:
        # Last-ditch guard: never allow JSON serialization to crash logging.
        return json.dumps(str(value), **kwargs)


def safe_json_dump(value, fp, **kwargs):
    kwargs.setdefault("default", str)
    try:
        return json.dump(sanitize_for_json(value), fp, **kwargs)
    except TypeError:
        return json.dump(str(value), fp, **kwargs)


def atomic_json_dump(value, path, **kwargs):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    kwargs.setdefault("indent", 2)
    kwargs.setdefault("sort_keys", True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w") as handle:
        safe_json_dump(value, handle, **kwargs)
    os.replace(tmp_path, path)


def load_json(path):
    with open(path, "r") as handle:
        return json.load(handle)


def log_event(level, message, **fields):
    payload = {"message": message, **fields}
    try:
        logging.log(level, safe_json_dumps(payload, sort_keys=True))
    except Exception as exc:
        logging.log(level, f"log_event_serialization_failed: {exc} message={message}")
