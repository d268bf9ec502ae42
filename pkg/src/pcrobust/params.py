"""Dotted-path access to the tensors inside nested parameter containers.

Model parameters are plain dataclasses holding numpy arrays, lists of
layers, or nested dataclasses. Flattening them to an ordered
{"phi.0.weight": array, ...} mapping is what the optimizer, the checkpoint
format, and the gradient checker all share.
"""

import dataclasses

import numpy as np

BUFFER_SUFFIXES = ("running_mean", "running_var")


def named_arrays(obj, prefix=""):
    """Flatten a parameter tree to an insertion-ordered {path: ndarray} dict."""
    out = {}
    if obj is None:
        return out
    if isinstance(obj, np.ndarray):
        out[prefix] = obj
        return out
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            path = f"{prefix}.{f.name}" if prefix else f.name
            out.update(named_arrays(child, path))
        return out
    if isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            path = f"{prefix}.{i}" if prefix else str(i)
            out.update(named_arrays(child, path))
        return out
    if isinstance(obj, dict):
        for key, child in obj.items():
            path = f"{prefix}.{key}" if prefix else str(key)
            out.update(named_arrays(child, path))
        return out
    return out  # scalars/str hyperparameters are not tensors


def is_trainable(name):
    return not name.endswith(BUFFER_SUFFIXES)


def trainable_arrays(obj, prefix=""):
    return {k: v for k, v in named_arrays(obj, prefix).items() if is_trainable(k)}


def set_array(obj, path, value):
    """Assign into a parameter tree by dotted path (shapes must match)."""
    parts = path.split(".")
    target = obj
    for part in parts[:-1]:
        if isinstance(target, (list, tuple)):
            target = target[int(part)]
        else:
            target = getattr(target, part)
    leaf = parts[-1]
    if isinstance(target, (list, tuple)):
        current = target[int(leaf)]
        current[...] = value
    else:
        current = getattr(target, leaf)
        current[...] = value


def tree_checksum(obj):
    """Cheap fingerprint of every tensor, used to assert no mutation."""
    total = 0.0
    for name, arr in named_arrays(obj).items():
        total += float(np.abs(arr.astype(np.float64)).sum()) + len(name)
    return total
