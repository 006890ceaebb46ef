"""Adam training loop with paired image/mask augmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, TextIO

import numpy as np

from drsn.errors import InputError, NumericError
from drsn.model import SegNetwork, SegSample, euclidean_loss, euclidean_loss_backward
from drsn.rng import STREAM_AUGMENT, STREAM_SHUFFLE, stream

log = logging.getLogger(__name__)

MAX_SHIFT = 5


@dataclass
class TrainConfig:
    learning_rate: float = 0.0002
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: list[tuple[str, np.ndarray]], grads: list[np.ndarray],
              state: OptimizerState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for (name, _), g in zip(params, grads):
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for (name, p), g in zip(params, grads):
        if p.shape != g.shape:
            raise InputError(f"{name}: gradient shape {g.shape} does not match {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= (cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.dtype)


class UniformSource(Protocol):
    def uniform(self) -> float: ...
    def below(self, n: int) -> int: ...


@dataclass(frozen=True)
class Transform:
    hflip: bool = False
    vflip: bool = False
    shift_rows: int = 0
    shift_cols: int = 0


def draw_transform(rng: UniformSource) -> Transform:
    return Transform(
        hflip=rng.uniform() < 0.5,
        vflip=rng.uniform() < 0.5,
        shift_rows=rng.below(2 * MAX_SHIFT + 1) - MAX_SHIFT,
        shift_cols=rng.below(2 * MAX_SHIFT + 1) - MAX_SHIFT,
    )


def _shift(plane: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Integer translation of the last two axes with zero fill."""
    out = np.zeros_like(plane)
    h, w = plane.shape[-2:]
    if abs(dr) >= h or abs(dc) >= w:
        return out
    src_r = slice(max(0, -dr), h - max(0, dr))
    dst_r = slice(max(0, dr), h - max(0, -dr))
    src_c = slice(max(0, -dc), w - max(0, dc))
    dst_c = slice(max(0, dc), w - max(0, -dc))
    out[..., dst_r, dst_c] = plane[..., src_r, src_c]
    return out


def apply_transform(x: np.ndarray, t: Transform) -> np.ndarray:
    if t.hflip:
        x = x[..., :, ::-1]
    if t.vflip:
        x = x[..., ::-1, :]
    return np.ascontiguousarray(_shift(x, t.shift_rows, t.shift_cols))


def augment(sample: SegSample, rng: UniformSource) -> SegSample:
    """Random flips and a shift in [-5, 5] px, applied identically to image and mask."""
    t = draw_transform(rng)
    return SegSample(apply_transform(sample.image, t), apply_transform(sample.mask, t))


@dataclass
class TrainResult:
    steps: list[tuple[int, int, float]]  # (epoch, step, loss)
    epochs: list[tuple[int, float]]  # (epoch, mean loss)

    @property
    def final_loss(self) -> float:
        return self.steps[-1][2]


def stack(samples: list[SegSample], dtype) -> tuple[np.ndarray, np.ndarray]:
    images = np.concatenate([s.image for s in samples]).astype(dtype)
    masks = np.concatenate([s.mask for s in samples]).astype(dtype)
    return images, masks


def train_step(net: SegNetwork, images: np.ndarray, masks: np.ndarray,
               state: OptimizerState, cfg: TrainConfig) -> float:
    """Forward, loss, backward and one Adam update. Returns the pre-update loss."""
    pred = net.forward(images)
    loss = euclidean_loss(pred, masks)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at step {state.step + 1}")
    net.zero_grad()
    net.backward(euclidean_loss_backward(pred, masks))
    params = net.parameters()
    adam_step([(name, p) for name, p, _ in params], [g for _, _, g in params], state, cfg)
    return loss


def format_loss(loss: float) -> str:
    return repr(float(loss))


def train(dataset: list[SegSample], net: SegNetwork, cfg: TrainConfig,
          log_file: TextIO | None = None, state: OptimizerState | None = None) -> TrainResult:
    """Run ``cfg.epochs`` passes of shuffled mini-batches over ``dataset``.

    With ``log_file`` set, writes the CSV header ``epoch,step,loss``, one row
    per step, and a summary row ``<epoch>,mean,<mean loss>`` after each epoch.
    """
    if not dataset:
        raise InputError("training dataset is empty")
    size = dataset[0].size
    if any(s.size != size for s in dataset):
        raise InputError("all training samples must have the same size")
    if net.size is None:
        net.size = size
    elif tuple(net.size) != size:
        raise InputError(f"samples are {size}, network was configured for {tuple(net.size)}")
    state = state or OptimizerState()
    shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE)
    augment_rng = stream(cfg.seed, STREAM_AUGMENT)
    if log_file is not None:
        log_file.write("epoch,step,loss\n")

    steps: list[tuple[int, int, float]] = []
    epochs: list[tuple[int, float]] = []
    order = list(range(len(dataset)))
    for epoch in range(1, cfg.epochs + 1):
        shuffle_rng.shuffle(order)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, augment_rng) for s in batch]
            images, masks = stack(batch, net.dtype)
            loss = train_step(net, images, masks, state, cfg)
            losses.append(loss)
            steps.append((epoch, state.step, loss))
            if log_file is not None:
                log_file.write(f"{epoch},{state.step},{format_loss(loss)}\n")
                log_file.flush()
        mean = float(np.mean(losses))
        epochs.append((epoch, mean))
        if log_file is not None:
            log_file.write(f"{epoch},mean,{format_loss(mean)}\n")
        log.info("epoch %d: mean loss %.6f", epoch, mean)
    return TrainResult(steps, epochs)
