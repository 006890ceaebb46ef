"""Standard convolution and activations with their backward passes.

Convolutions are stride 1 with zero "same" padding. The public functions take
NCHW arrays. The ``*_cached`` pair used inside the network works channels-last,
(n, h, w, c), which keeps the long pixel axis as the GEMM row dimension and
saves a transpose per layer. The input is copied once into a zero-padded
buffer and the output is accumulated as one matrix product per kernel tap
over shifted row blocks of that buffer, so no im2col copy is made.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from drsn.errors import DimensionError
from drsn.tensor import FLOAT64, Shape4, check4, check_finite, same_shape


@dataclass
class ConvLayer:
    weights: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray  # (out_c,)
    grad_weights: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.weights.ndim != 4:
            raise DimensionError(f"weights must be 4D, got {self.weights.shape}")
        _, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError(f"kernel must be odd-sized for same padding, got {kh}x{kw}")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def uniform(cls, in_c: int, out_c: int, kh: int, kw: int,
                rng: np.random.Generator, dtype=FLOAT64) -> ConvLayer:
        """Glorot-style uniform(-s, s) weights, zero bias.

        Values are drawn in float32 so a fresh layer survives a float32
        checkpoint round trip exactly, whatever ``dtype`` it is built in.
        """
        s = np.sqrt(6.0 / (in_c * kh * kw + out_c * kh * kw))
        w = rng.uniform(-s, s, size=(out_c, in_c, kh, kw)).astype(np.float32)
        return cls(w.astype(dtype), np.zeros(out_c, dtype=dtype))

    @classmethod
    def zeros(cls, in_c: int, out_c: int, kh: int, kw: int, dtype=FLOAT64) -> ConvLayer:
        return cls(np.zeros((out_c, in_c, kh, kw), dtype=dtype), np.zeros(out_c, dtype=dtype))

    @property
    def out_c(self) -> int:
        return self.weights.shape[0]

    @property
    def in_c(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    @property
    def dtype(self) -> np.dtype:
        return self.weights.dtype

    def zero_grad(self) -> None:
        self.grad_weights.fill(0)
        self.grad_bias.fill(0)

    def astype(self, dtype) -> ConvLayer:
        return ConvLayer(self.weights.astype(dtype), self.bias.astype(dtype))


def _check_input(x: np.ndarray, layer: ConvLayer) -> None:
    check4(x, "x")
    if x.shape[1] != layer.in_c:
        raise DimensionError(f"input has {x.shape[1]} channels, layer expects {layer.in_c}")


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


@dataclass
class ConvCache:
    x_shape: Shape4  # (n, h, w, c)
    xp: np.ndarray  # zero-padded input, (n*hp*wp, c)


def pad_rows(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero-pad a channels-last (n, h, w, c) array and flatten it to (n*hp*wp, c)."""
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    out[:, ph:ph + h, pw:pw + w] = x
    return out.reshape(-1, c)


def crop_rows(buf: np.ndarray, x_shape: Shape4, ph: int, pw: int) -> np.ndarray:
    """Inverse of :func:`pad_rows`: drop the border, back to (n, h, w, c')."""
    n, h, w, _ = x_shape
    inner = buf.reshape(n, h + 2 * ph, w + 2 * pw, -1)[:, ph:ph + h, pw:pw + w]
    return np.ascontiguousarray(inner)


def _geometry(x_shape: Shape4, layer: ConvLayer):
    """Padding and the flat offset of every tap in the padded buffer.

    In the flattened padded buffer, tap (i, j) of the output at flat row q
    reads row q + (i - ph) * Wp + (j - pw). So every tap is one contiguous
    block of rows and the conv is a sum of kh*kw plain matrix products.
    Border rows of the buffer get garbage outputs that are discarded.
    """
    w = x_shape[2]
    kh, kw = layer.kernel
    ph, pw = kh // 2, kw // 2
    wp = w + 2 * pw
    taps = [(i, j, (i - ph) * wp + (j - pw)) for i in range(kh) for j in range(kw)]
    return ph, pw, ph * wp + pw, taps


def tap_major(weights: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Weights as (kh, kw, out_c, in_c), one contiguous matrix per tap.

    With ``transpose`` the per-tap matrices are (in_c, out_c) instead.
    matmul hands contiguous operands to BLAS; strided slices of the
    (out_c, in_c, kh, kw) tensor take a slow path.
    """
    return np.ascontiguousarray(weights.transpose((2, 3, 1, 0) if transpose else (2, 3, 0, 1)))


# Rows per block in the per-tap products. The products are skinny
# (K = channels), so they are bound by memory traffic; blocking keeps one
# block of input and output in cache across all taps. Measured best on
# OpenBLAS between 512 and 768; larger blocks fall off a cliff near 1024.
ROW_BLOCK = 768


def _blocks(lo: int, span: int):
    for start in range(lo, lo + span, ROW_BLOCK):
        yield start, min(start + ROW_BLOCK, lo + span)


def conv_forward_cached(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, ConvCache]:
    """Channels-last conv: x is (n, h, w, in_c), the result (n, h, w, out_c)."""
    check4(x, "x")
    if x.shape[3] != layer.in_c:
        raise DimensionError(f"input has {x.shape[3]} channels, layer expects {layer.in_c}")
    ph, pw, lo, taps = _geometry(x.shape, layer)
    xp = pad_rows(x, ph, pw)
    span = xp.shape[0] - 2 * lo
    y = np.zeros((xp.shape[0], layer.out_c), dtype=np.result_type(x, layer.weights))
    y[lo:lo + span] += layer.bias
    wt = tap_major(layer.weights, transpose=True)
    for start, stop in _blocks(lo, span):
        acc = y[start:stop]
        for i, j, o in taps:
            acc += xp[start + o:stop + o] @ wt[i, j]
    return crop_rows(y, x.shape, ph, pw), ConvCache(x.shape, xp)


def conv_backward_cached(cache: ConvCache, layer: ConvLayer, dy: np.ndarray) -> np.ndarray:
    """Channels-last backward: dy is (n, h, w, out_c); returns dx (n, h, w, in_c)."""
    n, h, w, _ = cache.x_shape
    if dy.shape != (n, h, w, layer.out_c):
        raise DimensionError(f"dy shape {dy.shape} does not match output {(n, h, w, layer.out_c)}")
    ph, pw, lo, taps = _geometry(cache.x_shape, layer)
    span = cache.xp.shape[0] - 2 * lo
    # zero border in the padded dy keeps garbage rows out of every sum
    dp = pad_rows(dy, ph, pw)
    layer.grad_bias += dy.reshape(-1, layer.out_c).sum(axis=0)
    xp = cache.xp
    dxp = np.zeros_like(xp)
    wt = tap_major(layer.weights)
    gw = np.zeros(wt.shape, dtype=np.result_type(dy, xp))
    for start, stop in _blocks(lo, span):
        d = dp[start:stop]
        for i, j, o in taps:
            gw[i, j] += d.T @ xp[start + o:stop + o]
            dxp[start + o:stop + o] += d @ wt[i, j]
    layer.grad_weights += gw.transpose(2, 3, 0, 1)
    return crop_rows(dxp, cache.x_shape, ph, pw)


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """y = bias + sum over kernel taps and input channels, zero padded, stride 1."""
    _check_input(x, layer)
    y, _ = conv_forward_cached(to_nhwc(x), layer)
    return check_finite(to_nchw(y), "conv2d output")


def conv2d_backward(x: np.ndarray, layer: ConvLayer, dy: np.ndarray) -> np.ndarray:
    """Return dL/dx and add dL/dw, dL/db into the layer's accumulators."""
    _check_input(x, layer)
    check4(dy, "dy")
    n, _, h, w = x.shape
    if dy.shape != (n, layer.out_c, h, w):
        raise DimensionError(f"dy shape {dy.shape} does not match output {(n, layer.out_c, h, w)}")
    _, cache = conv_forward_cached(to_nhwc(x), layer)
    dx = conv_backward_cached(cache, layer, to_nhwc(dy))
    return check_finite(to_nchw(dx), "conv2d dx")


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    same_shape(x, dy, "relu_backward")
    return dy * (x > 0)


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    """Logistic function, clamped so outputs stay strictly inside (0, 1)."""
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
    info = np.finfo(y.dtype)
    return np.clip(y, info.tiny, 1 - info.epsneg).astype(x.dtype, copy=False)


def sigmoid_backward(y_out: np.ndarray, dy: np.ndarray) -> np.ndarray:
    same_shape(y_out, dy, "sigmoid_backward")
    return dy * y_out * (1 - y_out)
