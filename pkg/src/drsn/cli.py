"""Command-line interface: synth, train, eval, infer, gradcheck."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from drsn.data import SynthSpec, generate_synthetic, load_dataset, load_pgm, save_dataset, save_pgm
from drsn.errors import ConfigError, DrsnError, InputError
from drsn.gradcheck import run_suite
from drsn.metrics import ConfusionCounts, confusion, confusion_csv, confusion_report
from drsn.model import SegNetwork, binarize, load_checkpoint, save_checkpoint
from drsn.train import TrainConfig, train

log = logging.getLogger("drsn")

EVAL_BATCH = 8


@dataclass
class RunConfig:
    channels: int = 32
    blocks: int = 3
    kernel: int = 3
    lr: float = 0.0002
    batch: int = 8
    epochs: int = 50
    seed: int = 0
    augment: bool = True
    threshold: float = 0.5
    size: int = 80

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.lr, batch_size=self.batch, epochs=self.epochs,
                           seed=self.seed, augment=self.augment)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(key: str, kind: type, text: str):
    if kind is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    cfg = base or RunConfig()
    kinds = {f.name: f.type for f in fields(RunConfig)}
    types = {"int": int, "float": float, "bool": bool}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        setattr(cfg, key, _parse_value(key, types[kinds[key]], value))
    if cfg.kernel < 1 or cfg.kernel % 2 == 0:
        raise ConfigError(f"kernel: must be a positive odd number, got {cfg.kernel}")
    if not 0 < cfg.threshold < 1:
        raise ConfigError(f"threshold: must lie in (0, 1), got {cfg.threshold}")
    for key in ("channels", "blocks", "batch", "epochs"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key}: must be >= 1")
    if cfg.lr <= 0:
        raise ConfigError("lr: must be > 0")
    if cfg.size < 16:
        raise ConfigError("size: must be >= 16")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())


def predict(net: SegNetwork, images: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    out = [net.forward(images[i:i + batch]) for i in range(0, len(images), batch)]
    return np.concatenate(out)


def cmd_synth(args) -> int:
    if args.count < 1:
        raise InputError("--count must be >= 1")
    spec = SynthSpec(count=args.count, size=args.size, seed=args.seed)
    written = save_dataset(generate_synthetic(spec), args.out)
    print(f"wrote {args.count} image/mask pairs ({len(written)} files) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset = load_dataset(args.data)
    if not dataset:
        raise InputError(f"no image/mask pairs found in {args.data}")
    for i, s in enumerate(dataset):
        if s.size != (cfg.size, cfg.size):
            raise InputError(f"sample {i:04d} is {s.size[0]}x{s.size[1]}, config size is {cfg.size}")
    net = SegNetwork(channels=cfg.channels, blocks=cfg.blocks, kernel=cfg.kernel,
                     seed=cfg.seed, size=(cfg.size, cfg.size))
    with open(args.log, "w", newline="") as fh:
        result = train(dataset, net, cfg.train_config(), log_file=fh)
    save_checkpoint(net, args.out)
    print(f"trained {len(result.steps)} steps over {cfg.epochs} epochs; final loss {result.final_loss:.6f}")
    return 0


def cmd_eval(args) -> int:
    net = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    if not dataset:
        raise InputError(f"no image/mask pairs found in {args.data}")
    if net.size is not None:
        for i, s in enumerate(dataset):
            if s.size != tuple(net.size):
                raise InputError(f"sample {i:04d} is {s.size[0]}x{s.size[1]}, "
                                 f"model expects {net.size[0]}x{net.size[1]}")
    counts = ConfusionCounts()
    images = np.concatenate([s.image for s in dataset])
    preds = binarize(predict(net, images), args.threshold)
    for s, p in zip(dataset, preds):
        counts = counts + confusion(p[None], s.mask)
    print(f"pixel accuracy: {counts.accuracy:.6f} over {len(dataset)} images")
    print(confusion_report(counts))
    print(confusion_csv(counts), end="")
    return 0


def cmd_infer(args) -> int:
    net = load_checkpoint(args.ckpt)
    plane = load_pgm(args.image)
    if net.size is not None and plane.shape != tuple(net.size):
        raise InputError(f"image is {plane.shape[0]}x{plane.shape[1]}, model expects {net.size[0]}x{net.size[1]}")
    pred = net.forward(plane[None, None])
    save_pgm(binarize(pred, args.threshold)[0, 0], args.out)
    print(f"wrote mask to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed)
    for r in results:
        print(r.line())
    failures = [r.name for r in results if not r.passed]
    if failures:
        print(f"{len(failures)} check(s) failed: {', '.join(failures)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drsn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic speckled-target dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=80)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", required=True, help="CSV metrics log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pixel accuracy of a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one PGM image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except DrsnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
