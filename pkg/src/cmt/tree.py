"""Walk parameter dataclasses as trees of named arrays."""
from __future__ import annotations

import dataclasses

import numpy as np


def _join(prefix, name):
    return f"{prefix}.{name}" if prefix else str(name)


def named_arrays(obj, prefix=""):
    """Yield ``(dotted_name, array)`` for every array leaf in ``obj``."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_arrays(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (tuple, list)):
        for i, item in enumerate(obj):
            yield from named_arrays(item, _join(prefix, i))
    elif isinstance(obj, dict):
        for k, item in obj.items():
            yield from named_arrays(item, _join(prefix, k))


def tree_map(fn, obj):
    """Apply ``fn`` to every array leaf, keeping all non-array metadata."""
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if dataclasses.is_dataclass(obj):
        return dataclasses.replace(obj, **{f.name: tree_map(fn, getattr(obj, f.name)) for f in dataclasses.fields(obj)})
    if isinstance(obj, tuple):
        return tuple(tree_map(fn, x) for x in obj)
    if isinstance(obj, list):
        return [tree_map(fn, x) for x in obj]
    if isinstance(obj, dict):
        return {k: tree_map(fn, v) for k, v in obj.items()}
    return obj


def tree_map2(fn, a, b):
    """Like :func:`tree_map` over two trees of identical structure."""
    if isinstance(a, np.ndarray):
        return fn(a, b)
    if dataclasses.is_dataclass(a):
        return dataclasses.replace(
            a, **{f.name: tree_map2(fn, getattr(a, f.name), getattr(b, f.name)) for f in dataclasses.fields(a)}
        )
    if isinstance(a, (tuple, list)):
        return type(a)(tree_map2(fn, x, y) for x, y in zip(a, b))
    if isinstance(a, dict):
        return {k: tree_map2(fn, a[k], b[k]) for k in a}
    return a


def astype(obj, dtype):
    return tree_map(lambda x: x.astype(dtype), obj)
