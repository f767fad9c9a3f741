"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order with
channels-first activations: ``(C, D, H, W)`` or ``(B, C, D, H, W)``.  Kernels
are ``(C_out, C_in, kd, kh, kw)``.  The helpers here add the shape checks the
rest of the package relies on; everything else is ordinary numpy.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

VERIFY_DTYPE = np.float64
TRAIN_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised on incompatible or invalid tensor shapes."""


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int], dtype=VERIFY_DTYPE) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=dtype)


def fill(shape: Sequence[int], value: float, dtype=VERIFY_DTYPE) -> np.ndarray:
    return np.full(_check_shape(shape), value, dtype=dtype)


def from_values(shape: Sequence[int], values, dtype=VERIFY_DTYPE) -> np.ndarray:
    shape = _check_shape(shape)
    flat = np.asarray(values, dtype=dtype).ravel()
    if flat.size != int(np.prod(shape)):
        raise ShapeError(
            f"{flat.size} values cannot fill shape {shape} "
            f"({int(np.prod(shape))} elements)"
        )
    return flat.reshape(shape).copy()


def check_broadcast(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> None:
    """``b`` must match ``a`` axis by axis, or have extent 1 where they differ."""
    if b_shape == () or a_shape == b_shape:
        return
    if len(a_shape) != len(b_shape) or any(
        bs != as_ and bs != 1 for as_, bs in zip(a_shape, b_shape)
    ):
        raise ShapeError(f"shape {b_shape} does not broadcast onto {a_shape}")


_EWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def ewise(op: str, a: np.ndarray, b=None) -> np.ndarray:
    """Elementwise ``add``, ``sub``, ``mul`` or ``relu`` (max with 0).

    ``b`` may be a scalar or an array that broadcasts onto ``a``; the result
    always has ``a``'s shape.
    """
    a = np.asarray(a)
    if op == "relu":
        return np.maximum(a, 0)
    if op not in _EWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    b = np.asarray(b, dtype=a.dtype)
    check_broadcast(a.shape, b.shape)
    return _EWISE[op](a, b)


def reduce(op: str, a: np.ndarray, axis: int | None = None, keepdims: bool = False):
    """``sum``, ``mean`` or ``argmax`` along ``axis`` (``None`` = all axes)."""
    a = np.asarray(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
    if op == "sum":
        return np.sum(a, axis=axis, keepdims=keepdims)
    if op == "mean":
        return np.mean(a, axis=axis, keepdims=keepdims)
    if op == "argmax":
        return np.argmax(a, axis=axis, keepdims=keepdims)
    raise ValueError(f"unknown reduction {op!r}")


def pad_crop(a: np.ndarray, amounts: Sequence[tuple[int, int]], mode: str = "pad") -> np.ndarray:
    """Zero-pad or crop each axis by ``(low, high)`` amounts.

    ``amounts`` may be shorter than the rank, in which case it applies to the
    trailing axes.
    """
    a = np.asarray(a)
    amounts = [(0, 0)] * (a.ndim - len(amounts)) + [tuple(p) for p in amounts]
    if len(amounts) != a.ndim:
        raise ShapeError(f"{len(amounts)} pad/crop pairs for rank {a.ndim}")
    if any(lo < 0 or hi < 0 for lo, hi in amounts):
        raise ShapeError(f"negative pad/crop amount in {amounts}")
    if mode == "pad":
        return np.pad(a, amounts)
    if mode == "crop":
        for (lo, hi), n in zip(amounts, a.shape):
            if lo + hi >= n:
                raise ShapeError(f"cannot crop {lo}+{hi} from extent {n}")
        return a[tuple(slice(lo, n - hi) for (lo, hi), n in zip(amounts, a.shape))].copy()
    raise ValueError(f"unknown pad_crop mode {mode!r}")


def center_crop_amounts(src: Sequence[int], dst: Sequence[int]) -> list[tuple[int, int]]:
    """Per-axis (low, high) margins that center-crop ``src`` down to ``dst``."""
    out = []
    for s, d in zip(src, dst):
        if d > s:
            raise ShapeError(f"cannot crop extent {s} to larger extent {d}")
        lo = (s - d) // 2
        out.append((lo, s - d - lo))
    return out
