"""Dense float64 tensors in row-major NCHW layout.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 with 1 to 4
dimensions.  Every helper here returns a fresh array and leaves its inputs
untouched.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .rng import seeded_uniform

__all__ = [
    "as_tensor",
    "zeros",
    "zeros_like",
    "reshape",
    "slice_channels",
    "concat_channels",
    "add",
    "scale",
    "seeded_uniform",
]

CHANNEL_AXIS = 1


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4:
        raise ShapeError(f"tensors have 1 to 4 dimensions, got shape {shape}")
    for axis, extent in enumerate(shape):
        if extent < 1:
            raise ShapeError(f"axis {axis} has extent {extent}; all extents must be >= 1")
    return shape


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Copy ``data`` into a C-contiguous float64 array, optionally reshaped."""
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if shape is not None:
        shape = _check_shape(shape)
        if arr.size != math.prod(shape):
            raise ShapeError(
                f"data has {arr.size} elements but shape {shape} needs {math.prod(shape)}"
            )
        arr = arr.reshape(shape)
    else:
        _check_shape(arr.shape)
    return arr


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=np.float64)


def zeros_like(t: np.ndarray) -> np.ndarray:
    return np.zeros_like(t, dtype=np.float64)


def reshape(t: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    shape = _check_shape(shape)
    if t.size != math.prod(shape):
        raise ShapeError(f"cannot reshape {tuple(t.shape)} ({t.size} elements) to {shape}")
    return np.array(t, dtype=np.float64, copy=True).reshape(shape)


def slice_channels(t: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Channels ``[start, stop)`` of an NCHW tensor."""
    if t.ndim != 4:
        raise ShapeError(f"slice_channels expects an NCHW tensor, got shape {tuple(t.shape)}")
    c = t.shape[CHANNEL_AXIS]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel range [{start}, {stop}) is outside axis 1 of extent {c}")
    return t[:, start:stop].copy()


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.ndim != 4:
            raise ShapeError(f"part {i} is not NCHW: shape {tuple(p.shape)}")
        for axis, name in ((0, "N"), (2, "H"), (3, "W")):
            if p.shape[axis] != ref[axis]:
                raise ShapeError(
                    f"part {i} has {name} (axis {axis}) extent {p.shape[axis]}, expected {ref[axis]}"
                )
    return np.concatenate(parts, axis=CHANNEL_AXIS)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        for axis, (ea, eb) in enumerate(zip(a.shape, b.shape)):
            if ea != eb:
                raise ShapeError(f"add: axis {axis} extents differ ({ea} vs {eb})")
        raise ShapeError(f"add: rank mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def scale(t: np.ndarray, factor: float) -> np.ndarray:
    return t * float(factor)
