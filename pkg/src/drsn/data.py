"""Synthetic speckled-target data and PGM file I/O.

Each synthetic sample is a single blob-shaped target on a flat background,
multiplied by gamma speckle with unit mean::

    image = clip(clean * speckle, 0, 1),   speckle ~ Gamma(L, 1/L)

Datasets on disk are directories of ``NNNN_img.pgm`` / ``NNNN_mask.pgm``
pairs (binary P5, maxval 255, masks as 0/255).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from drsn.errors import FormatError, InputError
from drsn.model import SegSample
from drsn.rng import STREAM_DATA, stream

MIN_AREA = 0.05
MAX_AREA = 0.40


@dataclass(frozen=True)
class SynthSpec:
    count: int
    size: int = 80
    seed: int = 0
    target_mean: float = 0.7
    background_mean: float = 0.2
    looks: float = 1.0

    def __post_init__(self) -> None:
        if self.count < 0:
            raise InputError("count must be >= 0")
        if self.size < 16:
            raise InputError(f"size must be >= 16, got {self.size}")
        if not self.target_mean > self.background_mean > 0:
            raise InputError("need target_mean > background_mean > 0")
        if self.looks <= 0:
            raise InputError("looks must be positive")


def _target_region(size: int, rng: np.random.Generator) -> np.ndarray:
    """Perturbed ellipse with area fraction in [MIN_AREA, MAX_AREA]."""
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    while True:
        a, b = rng.uniform(0.12, 0.42, size=2) * size
        theta = rng.uniform(0, np.pi)
        cr, cc0 = rng.uniform(0.25, 0.75, size=2) * size
        harmonics = rng.uniform(0, 0.12, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)

        dr, dc = rr - cr, cc - cc0
        u = (dr * np.cos(theta) + dc * np.sin(theta)) / a
        v = (-dr * np.sin(theta) + dc * np.cos(theta)) / b
        phi = np.arctan2(v, u)
        radius = 1.0 + sum(h * np.cos((k + 2) * phi + p) for k, (h, p) in enumerate(zip(harmonics, phases)))
        mask = np.hypot(u, v) <= radius
        if MIN_AREA <= mask.mean() <= MAX_AREA:
            return mask


def synth_sample(spec: SynthSpec, index: int) -> SegSample:
    rng = stream(spec.seed, STREAM_DATA, index).numpy()
    region = _target_region(spec.size, rng)
    clean = np.where(region, spec.target_mean, spec.background_mean)
    speckle = rng.gamma(shape=spec.looks, scale=1.0 / spec.looks, size=clean.shape)
    image = np.clip(clean * speckle, 0.0, 1.0)
    return SegSample(image[None, None], region.astype(np.float64)[None, None])


def generate_synthetic(spec: SynthSpec) -> list[SegSample]:
    """Pure function of ``spec``; sample i depends only on (seed, i)."""
    return [synth_sample(spec, i) for i in range(spec.count)]


def save_pgm(plane: np.ndarray, path: str | Path) -> None:
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise InputError(f"PGM plane must be 2D, got shape {plane.shape}")
    if not (np.isfinite(plane).all() and plane.min() >= 0.0 and plane.max() <= 1.0):
        raise InputError("PGM values must lie in [0, 1]")
    h, w = plane.shape
    pixels = np.floor(plane * 255.0 + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("PGM header truncated")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise FormatError("PGM header truncated")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data):
        raise FormatError("PGM data truncated")
    return tokens, pos + 1


def load_pgm(path: str | Path) -> np.ndarray:
    """Read a binary (P5) PGM into a float64 plane scaled to [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: unsupported PGM magic {data[:2]!r}, only P5 is read")
    tokens, start = _header_tokens(data, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise FormatError(f"{path}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    raster = data[start:start + w * h]
    if len(raster) != w * h:
        raise FormatError(f"{path}: PGM data truncated ({len(raster)} of {w * h} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


_PAIR_RE = re.compile(r"^(\d{4})_(img|mask)\.pgm$")


def save_dataset(samples: list[SegSample], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, s in enumerate(samples):
        for kind, plane in (("img", s.image), ("mask", s.mask)):
            path = directory / f"{i:04d}_{kind}.pgm"
            save_pgm(plane[0, 0], path)
            written.append(path)
    return written


def load_dataset(directory: str | Path) -> list[SegSample]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"dataset directory {directory} does not exist")
    pairs: dict[str, dict[str, Path]] = {}
    for path in directory.iterdir():
        m = _PAIR_RE.match(path.name)
        if m:
            pairs.setdefault(m.group(1), {})[m.group(2)] = path
    samples = []
    for index in sorted(pairs, key=int):
        files = pairs[index]
        for kind in ("img", "mask"):
            if kind not in files:
                raise InputError(f"sample {index}: missing {index}_{kind}.pgm")
        image = load_pgm(files["img"])
        mask = (load_pgm(files["mask"]) >= 128 / 255).astype(np.float64)
        if image.shape != mask.shape:
            raise InputError(f"sample {index}: image {image.shape} and mask {mask.shape} sizes differ")
        samples.append(SegSample(image[None, None], mask[None, None]))
    return samples
