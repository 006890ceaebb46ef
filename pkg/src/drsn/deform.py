"""Deformable 2D convolution.

Each output location p0 and kernel tap p_n reads the input at the fractional
location p0 + p_n + dp through the bilinear kernel

    G(q, p) = max(0, 1 - |q_row - p_row|) * max(0, 1 - |q_col - p_col|),

so only the four integral neighbours of p carry weight. Locations outside the
map read as zero. Sampling is one sparse matrix product that yields an
im2col buffer of shape (n*h*w, taps*c); the convolution is then a single
matrix product with the flattened weights.

Offsets have shape (n, 2*kh*kw, h, w): channel 2k is the row offset and 2k+1
the column offset of kernel tap k, taps enumerated row-major. One offset pair
is shared by all input channels. As in the ops module, the ``*_cached`` pair
used by the network takes channels-last arrays, offsets (n, h, w, 2*kh*kw).

Derivative convention at the kinks of G: corners are the floor of p and its
+1 neighbours, so the location gradient is the right-sided derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from drsn.errors import DimensionError
from drsn.ops import ConvLayer, to_nchw, to_nhwc
from drsn.tensor import FLOAT64, Shape4, check4, check_finite


class FractionalLoc(NamedTuple):
    row: float
    col: float


def _corners(pr, pc):
    """Four integral neighbours of (pr, pc) with their G weights and dG/dp.

    Works elementwise on arrays or scalars. Returns a list of
    (row, col, weight, d_weight/d_row, d_weight/d_col) per corner.
    """
    r0 = np.floor(pr)
    c0 = np.floor(pc)
    fr = pr - r0
    fc = pc - c0
    gr, gc = 1 - fr, 1 - fc
    return [
        (r0, c0, gr * gc, -gc, -gr),
        (r0, c0 + 1, gr * fc, -fc, gr),
        (r0 + 1, c0, fr * gc, gc, -fr),
        (r0 + 1, c0 + 1, fr * fc, fc, fr),
    ]


def bilinear_sample(plane: np.ndarray, p: FractionalLoc | tuple[float, float]) -> float:
    """Value of a 2D map at a fractional location, zero outside the map."""
    plane = np.asarray(plane)
    h, w = plane.shape
    total = 0.0
    for r, c, g, _, _ in _corners(float(p[0]), float(p[1])):
        if 0 <= r < h and 0 <= c < w:
            total += g * plane[int(r), int(c)]
    return total


def bilinear_sample_grad(plane: np.ndarray, p: FractionalLoc | tuple[float, float]):
    """Gradients of :func:`bilinear_sample`.

    Returns ``(corner_grads, (d_row, d_col))`` where ``corner_grads`` lists
    ``((row, col), weight)`` for each in-map neighbour; the weight is the
    derivative of the sample with respect to that map entry.
    """
    plane = np.asarray(plane)
    h, w = plane.shape
    corner_grads = []
    d_row = d_col = 0.0
    for r, c, g, gr, gc in _corners(float(p[0]), float(p[1])):
        if 0 <= r < h and 0 <= c < w:
            v = plane[int(r), int(c)]
            corner_grads.append(((int(r), int(c)), g))
            d_row += gr * v
            d_col += gc * v
    return corner_grads, (d_row, d_col)


@dataclass
class Sampling:
    """Sparse bilinear sampling operators for one offset field.

    Rows are ordered (batch, row, col, tap); columns index the flattened
    input positions (batch, row, col). With that row order the product with
    a channels-last input, viewed as (n*h*w, taps*c), is the im2col buffer.
    """

    weights: sp.csr_matrix  # G, four stored entries per row
    # per-axis factors of G, each flat over rows: low/high row weight,
    # low/high col weight, and the on-map masks that are their derivatives
    # up to sign; None when built without gradients
    factors: tuple[np.ndarray, ...] | None
    taps: int

    def location_grads(self, dots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """dL/dp_row and dL/dp_col per row from corner dot products (rows, 4)."""
        rw0, rw1, cw0, cw1, vr0, vr1, vc0, vc1 = self.factors
        d0, d1, d2, d3 = dots.T
        g_row = vr1 * (cw0 * d2 + cw1 * d3) - vr0 * (cw0 * d0 + cw1 * d1)
        g_col = rw0 * (vc1 * d1 - vc0 * d0) + rw1 * (vc1 * d3 - vc0 * d2)
        return g_row, g_col

    @property
    def corners(self) -> np.ndarray:
        """Input position of each row's four corners, (rows, 4)."""
        return self.weights.indices.reshape(-1, 4)


def build_sampling(offsets: np.ndarray, kh: int, kw: int, need_grad: bool = True) -> Sampling:
    """Sampling operators for a channels-last offset field (n, h, w, 2*kh*kw)."""
    n, h, w, _ = offsets.shape
    k = kh * kw
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if n * h * w >= 2**31:
        raise DimensionError("input too large for 32-bit sampling indices")
    dt = offsets.dtype
    rows = np.arange(h, dtype=dt)[None, :, None, None]
    cols = np.arange(w, dtype=dt)[None, None, :, None]
    tap_r = (np.arange(k) // kw - ph).astype(dt)
    tap_c = (np.arange(k) % kw - pw).astype(dt)
    # sampling locations, (n, h, w, k); anything beyond one pixel outside the
    # map has all-zero weights, so clipping there changes nothing
    pr = np.clip(rows + tap_r + offsets[..., 0::2], -2, h + 1)
    pc = np.clip(cols + tap_c + offsets[..., 1::2], -2, w + 1)

    r0 = np.floor(pr)
    c0 = np.floor(pc)
    fr = pr - r0
    fc = pc - c0
    r0 = r0.astype(np.int32)
    c0 = c0.astype(np.int32)
    # per-axis factors of G for the low/high neighbour, zeroed when that
    # neighbour is off the map, and their derivatives
    vr = (((r0 >= 0) & (r0 < h)).astype(dt), ((r0 >= -1) & (r0 < h - 1)).astype(dt))
    vc = (((c0 >= 0) & (c0 < w)).astype(dt), ((c0 >= -1) & (c0 < w - 1)).astype(dt))
    row_w = ((1 - fr) * vr[0], fr * vr[1])
    col_w = ((1 - fc) * vc[0], fc * vc[1])
    # off-map neighbours get an arbitrary in-range index; their weight is 0
    batch = (np.arange(n, dtype=np.int32) * (h * w))[:, None, None, None]
    row_i = tuple(np.clip(r0 + a, 0, h - 1) * w + batch for a in (0, 1))
    col_i = tuple(np.clip(c0 + b, 0, w - 1) for b in (0, 1))

    shape5 = (n, h, w, k, 4)
    idx = np.empty(shape5, dtype=np.int32)
    wts = np.empty(shape5, dtype=dt)
    # corner order: (r0, c0), (r0, c0+1), (r0+1, c0), (r0+1, c0+1)
    for i, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        idx[..., i] = row_i[a] + col_i[b]
        wts[..., i] = row_w[a] * col_w[b]

    n_rows = k * n * h * w
    shape = (n_rows, n * h * w)
    indices = idx.reshape(-1)
    indptr = np.arange(0, 4 * n_rows + 1, 4, dtype=np.int32)

    weights = sp.csr_matrix((wts.reshape(-1), indices, indptr), shape=shape)
    if not need_grad:
        return Sampling(weights, None, k)
    factors = tuple(f.reshape(-1) for f in (*row_w, *col_w, *vr, *vc))
    return Sampling(weights, factors, k)


def sample_taps(x_cl: np.ndarray, sampling: Sampling) -> np.ndarray:
    """Bilinear samples as an im2col buffer (n*h*w, taps*c), columns (tap, channel)."""
    nhw, c = x_cl.shape
    return (sampling.weights @ x_cl).reshape(nhw, sampling.taps * c)


def corner_dots(x_cl: np.ndarray, dvals: np.ndarray, corners: np.ndarray,
                chunk: int = 16384) -> np.ndarray:
    """(rows, 4) dot products of each row of ``dvals`` with its corner inputs.

    Gathers in chunks so the (chunk, 4, c) temporary stays small.
    """
    out = np.empty(corners.shape, dtype=np.result_type(x_cl, dvals))
    for start in range(0, len(corners), chunk):
        stop = start + chunk
        out[start:stop] = np.einsum("rkc,rc->rk", x_cl[corners[start:stop]], dvals[start:stop])
    return out


def _weight_matrix(layer: ConvLayer) -> np.ndarray:
    # (out_c, taps*in_c) with columns (tap, channel), matching sample_taps
    return layer.weights.transpose(0, 2, 3, 1).reshape(layer.out_c, -1)


def _check_args(x: np.ndarray, layer: ConvLayer, offsets: np.ndarray) -> None:
    check4(x, "x")
    check4(offsets, "offsets")
    if x.shape[1] != layer.in_c:
        raise DimensionError(f"input has {x.shape[1]} channels, layer expects {layer.in_c}")
    kh, kw = layer.kernel
    n, _, h, w = x.shape
    if offsets.shape != (n, 2 * kh * kw, h, w):
        raise DimensionError(f"offset field shape {offsets.shape}, expected {(n, 2 * kh * kw, h, w)}")
    check_finite(offsets, "offsets")


@dataclass
class DeformCache:
    x_shape: Shape4  # (n, h, w, c)
    x_cl: np.ndarray  # input as (n*h*w, c)
    vals: np.ndarray  # im2col buffer from sample_taps
    sampling: Sampling


def deform_forward_cached(x: np.ndarray, layer: ConvLayer,
                          offsets: np.ndarray) -> tuple[np.ndarray, DeformCache]:
    """Channels-last: x (n, h, w, in_c) and offsets (n, h, w, 2*taps) give (n, h, w, out_c)."""
    n, h, w, c = x.shape
    kh, kw = layer.kernel
    if c != layer.in_c:
        raise DimensionError(f"input has {c} channels, layer expects {layer.in_c}")
    if offsets.shape != (n, h, w, 2 * kh * kw):
        raise DimensionError(f"offset field shape {offsets.shape}, expected {(n, h, w, 2 * kh * kw)}")
    sampling = build_sampling(offsets, kh, kw)
    x_cl = x.reshape(-1, c)
    vals = sample_taps(x_cl, sampling)
    y = vals @ _weight_matrix(layer).T
    y += layer.bias
    return y.reshape(n, h, w, -1), DeformCache(x.shape, x_cl, vals, sampling)


def deform_backward_cached(cache: DeformCache, layer: ConvLayer,
                           dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channels-last backward: returns (dx, doffsets) shaped like x and offsets."""
    n, h, w, c = cache.x_shape
    if dy.shape != (n, h, w, layer.out_c):
        raise DimensionError(f"dy shape {dy.shape} does not match output {(n, h, w, layer.out_c)}")
    s = cache.sampling
    k = s.taps
    kh, kw = layer.kernel
    d = dy.reshape(-1, layer.out_c)
    layer.grad_bias += d.sum(axis=0)
    gw = (cache.vals.T @ d).reshape(kh, kw, c, layer.out_c)
    layer.grad_weights += gw.transpose(3, 2, 0, 1)
    # d(loss)/d(sampled values), one row per sampling-matrix row
    dvals = (d @ _weight_matrix(layer)).reshape(-1, c)
    dx = (s.weights.T @ dvals).reshape(n, h, w, c)

    # location gradient: sum over corners of dG/dp times <x(corner), dvals>
    dots = corner_dots(cache.x_cl, dvals, s.corners)
    g_row, g_col = s.location_grads(dots)
    doffsets = np.empty((n, h, w, 2 * k), dtype=dy.dtype)
    doffsets[..., 0::2] = g_row.reshape(n, h, w, k)
    doffsets[..., 1::2] = g_col.reshape(n, h, w, k)
    return dx, doffsets


def deform_conv2d_forward(x: np.ndarray, layer: ConvLayer, offsets: np.ndarray) -> np.ndarray:
    """y(p0) = bias + sum_n w(p_n) * x(p0 + p_n + dp_n), x sampled bilinearly."""
    _check_args(x, layer, offsets)
    y, _ = deform_forward_cached(to_nhwc(x), layer, to_nhwc(offsets))
    return check_finite(to_nchw(y), "deform_conv2d output")


def deform_conv2d_backward(x: np.ndarray, layer: ConvLayer, offsets: np.ndarray,
                           dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (dx, doffsets); weight and bias gradients go into ``layer``."""
    _check_args(x, layer, offsets)
    check4(dy, "dy")
    n, _, h, w = x.shape
    if dy.shape != (n, layer.out_c, h, w):
        raise DimensionError(f"dy shape {dy.shape} does not match output {(n, layer.out_c, h, w)}")
    _, cache = deform_forward_cached(to_nhwc(x), layer, to_nhwc(offsets))
    dx, doffsets = deform_backward_cached(cache, layer, to_nhwc(dy))
    return check_finite(to_nchw(dx), "deform dx"), check_finite(to_nchw(doffsets), "deform doffsets")


def make_offset_layer(in_c: int, kh: int, kw: int, dtype=FLOAT64) -> ConvLayer:
    """Zero-initialised conv predicting 2*kh*kw offset channels.

    With zero weights and bias the predicted offsets are exactly zero, so a
    fresh deformable layer behaves as a plain convolution.
    """
    return ConvLayer.zeros(in_c, 2 * kh * kw, kh, kw, dtype=dtype)


__all__ = [
    "FractionalLoc",
    "bilinear_sample",
    "bilinear_sample_grad",
    "build_sampling",
    "deform_conv2d_backward",
    "deform_conv2d_forward",
    "make_offset_layer",
]
