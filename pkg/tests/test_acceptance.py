"""Acceptance suite: one PASS/FAIL line per criterion, with wall time.

The long runs (overfit, end-to-end, determinism) are marked ``slow``;
deselect them with ``-m "not slow"``.
"""

import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from drsn import cli
from drsn.data import SynthSpec, generate_synthetic, load_dataset
from drsn.deform import deform_conv2d_forward
from drsn.gradcheck import run_suite
from drsn.metrics import ConfusionCounts, confusion_report, pixel_accuracy, report_rows
from drsn.model import SegNetwork, binarize, euclidean_loss, load_checkpoint
from drsn.ops import ConvLayer, conv2d_forward
from drsn.train import TrainConfig, train
from oracles import deform_conv2d_loops

ZERO_OFFSET_RTOL = 1e-12
ORACLE_ATOL = 1e-10
OVERFIT_LOSS = 0.01
E2E_ACCURACY = 0.95
ROW_SUM_TOL = 0.01


@pytest.fixture
def report(capsys):
    def emit(criterion: int, name: str, ok: bool, detail: str, seconds: float, limit: float | None = None):
        timing = f"{seconds:.1f}s" + (f" (limit {limit:.0f}s)" if limit else "")
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion} [{name}]: {detail}; {timing}")
    return emit


def test_c1_zero_offset_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for _ in range(100):
        n, c, h, w = (int(rng.integers(1, hi + 1)) for hi in (2, 4, 12, 12))
        k = int(rng.choice([1, 3, 5]))
        out = int(rng.integers(1, 5))
        x = rng.standard_normal((n, c, h, w))
        layer = ConvLayer(rng.standard_normal((out, c, k, k)), rng.standard_normal(out))
        ref = conv2d_forward(x, layer)
        got = deform_conv2d_forward(x, layer, np.zeros((n, 2 * k * k, h, w)))
        # relative to the largest output magnitude, so near-zero entries do not dominate
        err = np.max(np.abs(got - ref)) / np.max(np.abs(ref))
        worst = max(worst, float(err))
    dt = time.perf_counter() - t0
    ok = worst <= ZERO_OFFSET_RTOL and dt < 60
    report(1, "zero-offset equivalence", ok, f"100 configs, max rel error {worst:.2e}", dt, 60)
    assert ok


def test_c2_gradient_fidelity(report):
    t0 = time.perf_counter()
    results = run_suite(0)
    dt = time.perf_counter() - t0
    ok = all(r.passed for r in results) and dt < 120
    worst = ", ".join(f"{r.name} {r.max_rel_error:.1e}" for r in results)
    report(2, "gradient fidelity", ok, worst, dt, 120)
    assert ok


def test_c3_oracle_equivalence(report):
    t0 = time.perf_counter()
    worst = 0.0
    count = 0
    for n, c, h, w in itertools.product(range(1, 3), range(1, 4), range(1, 9), range(1, 9)):
        rng = np.random.default_rng([n, c, h, w])
        x = rng.standard_normal((n, c, h, w))
        layer = ConvLayer(rng.standard_normal((2, c, 3, 3)), rng.standard_normal(2))
        offsets = rng.uniform(-2.5, 2.5, size=(n, 18, h, w))
        expected = deform_conv2d_loops(x, layer.weights, layer.bias, offsets)
        worst = max(worst, float(np.max(np.abs(deform_conv2d_forward(x, layer, offsets) - expected))))
        count += 1
    dt = time.perf_counter() - t0
    ok = worst <= ORACLE_ATOL
    report(3, "oracle equivalence", ok, f"{count} shapes, max abs error {worst:.2e}", dt)
    assert ok


@pytest.mark.slow
def test_c4_overfit_one_batch(report):
    t0 = time.perf_counter()
    data = generate_synthetic(SynthSpec(count=8, size=80, seed=0))
    net = SegNetwork(seed=0)
    cfg = TrainConfig(learning_rate=0.0002, batch_size=8, epochs=500, augment=False)
    result = train(data, net, cfg)
    dt = time.perf_counter() - t0
    ok = len(result.steps) == 500 and result.final_loss < OVERFIT_LOSS and dt < 600
    report(4, "overfit one batch", ok, f"{len(result.steps)} steps, final loss {result.final_loss:.5f}", dt, 600)
    assert ok


E2E_CONFIG = "epochs = 20\nbatch = 8\nseed = 0\n"


def end_to_end(root: Path) -> tuple[float, Path, Path]:
    """synth, train, eval through the CLI; returns (accuracy, checkpoint, log)."""
    root.mkdir(parents=True)
    (root / "run.cfg").write_text(E2E_CONFIG)
    assert cli.main(["synth", "--out", str(root / "train"), "--count", "200", "--seed", "0"]) == 0
    assert cli.main(["synth", "--out", str(root / "test"), "--count", "50", "--seed", "1"]) == 0
    ckpt, log = root / "model.ckpt", root / "train.csv"
    assert cli.main(["train", "--data", str(root / "train"), "--config", str(root / "run.cfg"),
                     "--out", str(ckpt), "--log", str(log)]) == 0
    net = load_checkpoint(ckpt)
    test = load_dataset(root / "test")
    images = np.concatenate([s.image for s in test])
    masks = np.concatenate([s.mask for s in test])
    preds = binarize(cli.predict(net, images), 0.5)
    return pixel_accuracy(preds, masks), ckpt, log


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    t0 = time.perf_counter()
    acc, ckpt, log = end_to_end(tmp_path_factory.mktemp("e2e") / "a")
    return acc, ckpt, log, time.perf_counter() - t0


@pytest.mark.slow
def test_c5_end_to_end(first_run, report):
    acc, _, _, dt = first_run
    ok = acc >= E2E_ACCURACY and dt < 1800
    report(5, "desk-scale end-to-end", ok, f"test pixel accuracy {acc:.4f}", dt, 1800)
    assert ok


def test_c6_unit_fixtures(report):
    t0 = time.perf_counter()
    ones, zeros = np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2))
    losses = (euclidean_loss(ones, ones), euclidean_loss(np.full((1, 1, 1, 1), 0.5), np.zeros((1, 1, 1, 1))),
              euclidean_loss(ones, zeros))
    a = np.array([[1.0, 0.0], [1.0, 1.0]])
    b = a.copy()
    b[0, 1] = 1.0
    accs = (pixel_accuracy(a, a), pixel_accuracy(a, 1 - a), pixel_accuracy(a, b))

    rng = np.random.default_rng(6)
    sums_ok = True
    for _ in range(1000):
        counts = ConfusionCounts(*(int(v) for v in rng.integers(0, 10_000, size=4)))
        for row in report_rows(counts):
            if row is not None and abs(sum(row) - 100.0) > ROW_SUM_TOL:
                sums_ok = False
    text = confusion_report(ConfusionCounts(tp=3, fp=1, fn=2, tn=7))
    for line in text.splitlines()[1:3]:
        a_pct, b_pct = (float(v) for v in line.split()[1:3])
        sums_ok = sums_ok and abs(a_pct + b_pct - 100.0) <= ROW_SUM_TOL
    ok = losses == (0.0, 0.25, 1.0) and accs == (1.0, 0.0, 0.75) and sums_ok
    dt = time.perf_counter() - t0
    report(6, "exact unit fixtures", ok, f"loss {losses}, accuracy {accs}, row sums ok={sums_ok}", dt)
    assert ok


@pytest.mark.slow
def test_c7_determinism(first_run, tmp_path_factory, report):
    t0 = time.perf_counter()
    _, ckpt_a, log_a, _ = first_run
    _, ckpt_b, log_b = end_to_end(tmp_path_factory.mktemp("e2e") / "b")
    same_ckpt = ckpt_a.read_bytes() == ckpt_b.read_bytes()
    same_log = log_a.read_bytes() == log_b.read_bytes()
    dt = time.perf_counter() - t0
    ok = same_ckpt and same_log
    report(7, "determinism", ok, f"checkpoint identical={same_ckpt}, log identical={same_log}", dt)
    assert ok
