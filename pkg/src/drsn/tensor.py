"""Dense 4D tensors in (batch, channel, row, col) layout.

Tensors are plain C-contiguous ``numpy.ndarray`` objects, so the flat data
order is col fastest, then row, channel, batch. The helpers here validate
shape and finiteness and never modify their inputs.
"""

from __future__ import annotations

import os
from typing import Callable

import numpy as np

from drsn.errors import DimensionError, NumericError

# Reference and gradient-check precision.
FLOAT64 = np.dtype(np.float64)

# Training precision switch. float32 halves GEMM time; set DRSN_TRAIN_DTYPE=float64
# to train in double precision. Gradient checks always build float64 networks.
TRAIN_DTYPE = np.dtype(os.environ.get("DRSN_TRAIN_DTYPE", "float32"))
if TRAIN_DTYPE not in (np.dtype(np.float32), FLOAT64):
    raise ImportError(f"DRSN_TRAIN_DTYPE must be float32 or float64, got {TRAIN_DTYPE}")

Shape4 = tuple[int, int, int, int]


def check4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise DimensionError(f"{name} must be a 4D array, got shape {np.shape(x)}")
    if 0 in x.shape:
        raise DimensionError(f"{name} has an empty dimension: {x.shape}")
    return x


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"{name} contains NaN or Inf")
    return x


def same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what} shape mismatch: {a.shape} vs {b.shape}")


def zeros(n: int, c: int, h: int, w: int, dtype=FLOAT64) -> np.ndarray:
    dims = (n, c, h, w)
    if any(int(d) < 1 for d in dims):
        raise DimensionError(f"all dimensions must be >= 1, got {dims}")
    return np.zeros(dims, dtype=dtype)


def zeros_like(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(check4(x))


def from_nested(values, dtype=FLOAT64) -> np.ndarray:
    """Build a tensor from nested lists, padding missing leading axes with 1."""
    arr = np.array(values, dtype=dtype)
    while arr.ndim < 4:
        arr = arr[np.newaxis]
    return check_finite(check4(np.ascontiguousarray(arr)))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check4(a, "a")
    check4(b, "b")
    same_shape(a, b, "add")
    return check_finite(a + b, "add result")


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check4(a, "a")
    check4(b, "b")
    same_shape(a, b, "sub")
    return check_finite(a - b, "sub result")


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check4(a, "a")
    check4(b, "b")
    same_shape(a, b, "hadamard")
    return check_finite(a * b, "hadamard result")


def scale(x: np.ndarray, s: float) -> np.ndarray:
    return check_finite(check4(x) * x.dtype.type(s), "scale result")


def map_unary(x: np.ndarray, f: Callable) -> np.ndarray:
    """Apply ``f`` elementwise. ``f`` may be a numpy ufunc or a scalar callable."""
    check4(x)
    if isinstance(f, np.ufunc):
        out = f(x)
    else:
        out = np.fromiter((f(v) for v in x.ravel()), dtype=x.dtype, count=x.size)
    return check_finite(out.reshape(x.shape).astype(x.dtype, copy=False), "map_unary result")


def flat_index(shape: Shape4, n: int, c: int, r: int, col: int) -> int:
    N, C, H, W = shape
    if not (0 <= n < N and 0 <= c < C and 0 <= r < H and 0 <= col < W):
        raise DimensionError(f"index {(n, c, r, col)} out of range for {shape}")
    return ((n * C + c) * H + r) * W + col


def unflat_index(shape: Shape4, i: int) -> tuple[int, int, int, int]:
    N, C, H, W = shape
    if not 0 <= i < N * C * H * W:
        raise DimensionError(f"flat index {i} out of range for {shape}")
    i, col = divmod(i, W)
    i, r = divmod(i, H)
    n, c = divmod(i, C)
    return n, c, r, col
