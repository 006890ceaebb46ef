"""Extractor/reconstructor segmentation network, Euclidean loss, checkpoints.

Network layout (all convs stride 1, same padding)::

    extractor:     blocks x DeformResidualBlock
                   deform -> relu -> conv1 -> relu -> conv2 -> (+ skip) -> relu
    reconstructor: conv0 -> relu -> conv1 -> relu -> conv2 -> (+ 1x1 proj) -> sigmoid

Each deformable conv has its own zero-initialised offset conv fed by the same
input as the deformable conv.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from drsn.deform import deform_backward_cached, deform_forward_cached, make_offset_layer
from drsn.errors import DimensionError, FormatError, InputError, StateError
from drsn.ops import (
    ConvLayer,
    conv_backward_cached,
    conv_forward_cached,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
    to_nchw,
    to_nhwc,
)
from drsn.rng import STREAM_INIT, stream
from drsn.tensor import FLOAT64, TRAIN_DTYPE, check4, check_finite, same_shape


@dataclass
class SegSample:
    """Image/mask pair, both shaped (1, 1, H, W). Mask is exactly 0/1."""

    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        check4(self.image, "image")
        check4(self.mask, "mask")
        if self.image.shape[:2] != (1, 1):
            raise DimensionError(f"image must be (1, 1, H, W), got {self.image.shape}")
        if self.image.shape != self.mask.shape:
            raise InputError(f"image {self.image.shape} and mask {self.mask.shape} sizes differ")
        if not np.isin(self.mask, (0, 1)).all():
            raise InputError("mask must contain only 0 and 1")

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[2], self.image.shape[3]


class DeformResidualBlock:
    def __init__(self, in_c: int, channels: int, kernel: int,
                 rng: np.random.Generator, dtype=FLOAT64) -> None:
        self.offset = make_offset_layer(in_c, kernel, kernel, dtype=dtype)
        self.deform = ConvLayer.uniform(in_c, channels, kernel, kernel, rng, dtype)
        self.conv1 = ConvLayer.uniform(channels, channels, kernel, kernel, rng, dtype)
        self.conv2 = ConvLayer.uniform(channels, channels, kernel, kernel, rng, dtype)
        self.proj = ConvLayer.uniform(in_c, channels, 1, 1, rng, dtype) if in_c != channels else None

    def layers(self) -> Iterator[tuple[str, ConvLayer]]:
        yield "offset", self.offset
        yield "deform", self.deform
        yield "conv1", self.conv1
        yield "conv2", self.conv2
        if self.proj is not None:
            yield "proj", self.proj

    def forward(self, x: np.ndarray):
        off, c_off = conv_forward_cached(x, self.offset)
        a1, c_def = deform_forward_cached(x, self.deform, off)
        h1 = relu_forward(a1)
        a2, c1 = conv_forward_cached(h1, self.conv1)
        h2 = relu_forward(a2)
        a3, c2 = conv_forward_cached(h2, self.conv2)
        if self.proj is not None:
            skip, c_proj = conv_forward_cached(x, self.proj)
        else:
            skip, c_proj = x, None
        s = a3 + skip
        return relu_forward(s), (c_off, c_def, a1, c1, a2, c2, c_proj, s)

    def backward(self, cache, dout: np.ndarray) -> np.ndarray:
        c_off, c_def, a1, c1, a2, c2, c_proj, s = cache
        ds = relu_backward(s, dout)
        dh2 = conv_backward_cached(c2, self.conv2, ds)
        dh1 = conv_backward_cached(c1, self.conv1, relu_backward(a2, dh2))
        dx, doff = deform_backward_cached(c_def, self.deform, relu_backward(a1, dh1))
        dx += conv_backward_cached(c_off, self.offset, doff)
        if self.proj is not None:
            dx += conv_backward_cached(c_proj, self.proj, ds)
        else:
            dx += ds
        return dx


class ReconstructorBlock:
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator, dtype=FLOAT64) -> None:
        self.conv0 = ConvLayer.uniform(channels, channels, kernel, kernel, rng, dtype)
        self.conv1 = ConvLayer.uniform(channels, channels, kernel, kernel, rng, dtype)
        self.conv2 = ConvLayer.uniform(channels, 1, kernel, kernel, rng, dtype)
        self.proj = ConvLayer.uniform(channels, 1, 1, 1, rng, dtype)

    def layers(self) -> Iterator[tuple[str, ConvLayer]]:
        yield "conv0", self.conv0
        yield "conv1", self.conv1
        yield "conv2", self.conv2
        yield "proj", self.proj

    def forward(self, x: np.ndarray):
        a0, c0 = conv_forward_cached(x, self.conv0)
        h0 = relu_forward(a0)
        a1, c1 = conv_forward_cached(h0, self.conv1)
        h1 = relu_forward(a1)
        a2, c2 = conv_forward_cached(h1, self.conv2)
        skip, c_proj = conv_forward_cached(x, self.proj)
        return a2 + skip, (c0, a0, c1, a1, c2, c_proj)

    def backward(self, cache, dout: np.ndarray) -> np.ndarray:
        c0, a0, c1, a1, c2, c_proj = cache
        dh1 = conv_backward_cached(c2, self.conv2, dout)
        dh0 = conv_backward_cached(c1, self.conv1, relu_backward(a1, dh1))
        dx = conv_backward_cached(c0, self.conv0, relu_backward(a0, dh0))
        dx += conv_backward_cached(c_proj, self.proj, dout)
        return dx


class SegNetwork:
    """Deformable residual extractor followed by a residual reconstructor.

    ``size`` records the (H, W) the network was trained on; it is stored in
    checkpoints so inference can reject mismatched images. The convolutions
    themselves accept any spatial size.
    """

    def __init__(self, channels: int = 32, blocks: int = 3, kernel: int = 3,
                 in_channels: int = 1, seed: int = 0, dtype=TRAIN_DTYPE,
                 size: tuple[int, int] | None = None) -> None:
        if channels < 1 or blocks < 1 or in_channels < 1:
            raise DimensionError("channels, blocks and in_channels must be >= 1")
        if kernel < 1 or kernel % 2 == 0:
            raise DimensionError(f"kernel must be a positive odd number, got {kernel}")
        self.channels = channels
        self.kernel = kernel
        self.in_channels = in_channels
        self.dtype = np.dtype(dtype)
        self.size = size
        rng = stream(seed, STREAM_INIT).numpy()
        self.blocks = [
            DeformResidualBlock(in_channels if i == 0 else channels, channels, kernel, rng, self.dtype)
            for i in range(blocks)
        ]
        self.recon = ReconstructorBlock(channels, kernel, rng, self.dtype)
        self._cache = None

    def named_layers(self) -> Iterator[tuple[str, ConvLayer]]:
        for i, block in enumerate(self.blocks):
            for name, layer in block.layers():
                yield f"block{i}.{name}", layer
        for name, layer in self.recon.layers():
            yield f"recon.{name}", layer

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(name, value, gradient) triples in a fixed order."""
        out = []
        for name, layer in self.named_layers():
            out.append((f"{name}.weight", layer.weights, layer.grad_weights))
            out.append((f"{name}.bias", layer.bias, layer.grad_bias))
        return out

    def zero_grad(self) -> None:
        for _, layer in self.named_layers():
            layer.zero_grad()

    def forward(self, y: np.ndarray) -> np.ndarray:
        check4(y, "input")
        if y.shape[1] != self.in_channels:
            raise DimensionError(f"input has {y.shape[1]} channels, network expects {self.in_channels}")
        check_finite(y, "input")
        # blocks run channels-last; see the ops module
        h = to_nhwc(y.astype(self.dtype, copy=False))
        caches = []
        for block in self.blocks:
            h, c = block.forward(h)
            caches.append(c)
        logits, c_rec = self.recon.forward(h)
        pred = check_finite(to_nchw(sigmoid_forward(logits)), "network output")
        self._cache = (caches, c_rec, pred)
        return pred

    def backward(self, dpred: np.ndarray) -> None:
        """Accumulate every parameter gradient; consumes the forward cache."""
        if self._cache is None:
            raise StateError("backward called without a preceding forward")
        caches, c_rec, pred = self._cache
        self._cache = None
        same_shape(pred, dpred, "dpred")
        dlogits = sigmoid_backward(pred, dpred.astype(self.dtype, copy=False))
        d = self.recon.backward(c_rec, to_nhwc(dlogits))
        for block, c in zip(reversed(self.blocks), reversed(caches)):
            d = block.backward(c, d)

    def branch_pattern(self) -> list[np.ndarray]:
        """Which side of each non-smooth point the last forward landed on.

        That is the sign of every relu input and the integer corner cell of
        every bilinear sample. Two forwards with equal patterns lie on one
        smooth piece of the network function.
        """
        if self._cache is None:
            raise StateError("branch_pattern needs a preceding forward")
        caches, c_rec, _ = self._cache
        out = []
        for c_off, c_def, a1, c1, a2, c2, c_proj, s in caches:
            out += [c_def.sampling.weights.indices, a1 > 0, a2 > 0, s > 0]
        out += [c_rec[1] > 0, c_rec[3] > 0]
        return out

    __call__ = forward


def euclidean_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """(1/(W*H)) * sum of squared pixel errors, averaged over the batch."""
    check4(pred, "pred")
    same_shape(pred, target, "euclidean_loss")
    n, _, h, w = pred.shape
    d = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.sum(d * d)) / (n * h * w)


def euclidean_loss_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    check4(pred, "pred")
    same_shape(pred, target, "euclidean_loss_backward")
    n, _, h, w = pred.shape
    return (2.0 * (pred.astype(np.float64) - target) / (n * h * w)).astype(pred.dtype)


def binarize(pred: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (pred >= threshold).astype(pred.dtype)


# checkpoint format: b"DRSN", u32 version, u32 count, then per entry
# u16 name length, name, u8 rank, u32 dims, float32 little-endian values
MAGIC = b"DRSN"
VERSION = 1
SIZE_ENTRY = "meta.size"


def checkpoint_bytes(net: SegNetwork) -> bytes:
    entries = [(name, value) for name, value, _ in net.parameters()]
    if net.size is not None:
        entries.append((SIZE_ENTRY, np.array(net.size, dtype=np.float32)))
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net: SegNetwork, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def parse_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise FormatError("not a checkpoint: bad magic bytes")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("checkpoint truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("checkpoint entry name is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        entries[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint entries")
    return entries


def load_state(net: SegNetwork, entries: dict[str, np.ndarray]) -> None:
    """Copy checkpoint entries into ``net``; names and shapes must match exactly."""
    expected = {name: value for name, value, _ in net.parameters()}
    names = set(entries) - {SIZE_ENTRY}
    if names != set(expected):
        missing = sorted(set(expected) - names)
        extra = sorted(names - set(expected))
        raise FormatError(f"checkpoint does not match model (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, value in expected.items():
        if entries[name].shape != value.shape:
            raise FormatError(f"{name}: checkpoint shape {entries[name].shape}, model shape {value.shape}")
    for name, value in expected.items():
        value[...] = entries[name]
    if SIZE_ENTRY in entries:
        net.size = _size_from_entry(entries[SIZE_ENTRY])


def _size_from_entry(value: np.ndarray) -> tuple[int, int]:
    if value.shape != (2,):
        raise FormatError(f"{SIZE_ENTRY} must hold two values")
    return int(value[0]), int(value[1])


def load_checkpoint(path: str | Path, dtype=TRAIN_DTYPE) -> SegNetwork:
    """Rebuild a network from a checkpoint, inferring widths from the stored shapes."""
    entries = parse_checkpoint(Path(path).read_bytes())
    try:
        first = entries["block0.deform.weight"]
        channels, in_channels, kernel, _ = first.shape
    except (KeyError, ValueError) as exc:
        raise FormatError("checkpoint lacks a block0.deform.weight 4D entry") from exc
    blocks = 0
    while f"block{blocks}.deform.weight" in entries:
        blocks += 1
    net = SegNetwork(channels=channels, blocks=blocks, kernel=kernel, in_channels=in_channels,
                     dtype=dtype)
    load_state(net, entries)
    return net
