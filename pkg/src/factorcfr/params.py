"""Parameter-tree helpers.

Parameters live in nested dataclasses (see :mod:`factorcfr.nets` and
:mod:`factorcfr.encoder`).  The functions here walk those trees in a stable
order so the optimizer, the regularizer, checkpointing, and the
finite-difference tests all see the same flat ``path -> array`` view.
"""

from __future__ import annotations

import dataclasses

import numpy as np


def iter_arrays(obj, prefix=""):
    """Yield ``(path, array)`` for every ndarray leaf under ``obj``.

    Walks dataclasses by field order, lists/tuples by index, and dicts by
    sorted key.  Non-array scalars and strings are skipped.
    """
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            sub = getattr(obj, f.name)
            yield from iter_arrays(sub, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, sub in enumerate(obj):
            yield from iter_arrays(sub, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key in sorted(obj):
            yield from iter_arrays(obj[key], f"{prefix}.{key}" if prefix else str(key))


def add_grads(total, tree, prefix, scale=1.0):
    """Accumulate ``scale * tree`` into the flat gradient dict ``total``."""
    for path, arr in iter_arrays(tree, prefix):
        if path in total:
            total[path] += scale * arr
        else:
            total[path] = scale * np.asarray(arr, dtype=float)


def flatten(tree, prefix=""):
    return dict(iter_arrays(tree, prefix))


def assign_flat(tree, flat, prefix=""):
    """Copy values from a flat ``path -> array`` mapping into ``tree`` in place."""
    for path, arr in iter_arrays(tree, prefix):
        src = flat[path]
        if src.shape != arr.shape:
            raise ValueError(f"shape mismatch at {path}: {src.shape} vs {arr.shape}")
        arr[...] = src
