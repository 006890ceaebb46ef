"""Central finite-difference checks of every backward pass.

Every check builds a scalar objective ``L = <f(inputs), R>`` for a fixed
random ``R``, runs the analytic backward with ``dy = R`` and compares it to
``(L(x + h) - L(x - h)) / 2h`` entry by entry, in float64 with h = 1e-5.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from drsn.deform import deform_conv2d_backward, deform_conv2d_forward
from drsn.model import SegNetwork, euclidean_loss, euclidean_loss_backward
from drsn.ops import ConvLayer, conv2d_backward, conv2d_forward, sigmoid_backward, sigmoid_forward
from drsn.rng import STREAM_GRADCHECK, stream

STEP = 1e-5
# denominators below this are treated as this, so near-zero entries are judged
# on absolute error
REL_FLOOR = 1e-6

LAYER_TOL = 1e-4
LOSS_TOL = 1e-6
NETWORK_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<20} max rel error {self.max_rel_error:.3e}  (tol {self.tolerance:.0e})"


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = STEP,
                       indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``, perturbing ``x`` in place.

    With ``indices`` (flat positions) only those entries are evaluated and a
    1D array is returned.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    grad = np.zeros(len(positions)) if indices is not None else np.zeros(flat.size)
    for k, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        grad[k] = (up - down) / (2 * step)
    return grad if indices is not None else grad.reshape(x.shape)


def check_conv(rng: np.random.Generator) -> list[CheckResult]:
    x = rng.standard_normal((1, 2, 6, 6))
    layer = ConvLayer(rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2))
    r = rng.standard_normal((1, 2, 6, 6))

    def objective() -> float:
        return float(np.sum(conv2d_forward(x, layer) * r))

    dx = conv2d_backward(x, layer, r)
    return [
        CheckResult("conv2d.dx", rel_error(dx, numerical_gradient(objective, x)), LAYER_TOL),
        CheckResult("conv2d.dw", rel_error(layer.grad_weights,
                                           numerical_gradient(objective, layer.weights)), LAYER_TOL),
        CheckResult("conv2d.db", rel_error(layer.grad_bias,
                                           numerical_gradient(objective, layer.bias)), LAYER_TOL),
    ]


def kink_free_offsets(rng: np.random.Generator, shape, low=0.1, high=0.9) -> np.ndarray:
    """Offsets with a random integer part in {-1, 0, 1} and fractional part in [low, high]."""
    return rng.integers(-1, 2, size=shape) + rng.uniform(low, high, size=shape)


def check_deform(rng: np.random.Generator) -> list[CheckResult]:
    x = rng.standard_normal((1, 2, 6, 6))
    layer = ConvLayer(rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2))
    offsets = kink_free_offsets(rng, (1, 18, 6, 6))
    r = rng.standard_normal((1, 2, 6, 6))

    def objective() -> float:
        return float(np.sum(deform_conv2d_forward(x, layer, offsets) * r))

    dx, doff = deform_conv2d_backward(x, layer, offsets, r)
    return [
        CheckResult("deform.dx", rel_error(dx, numerical_gradient(objective, x)), LAYER_TOL),
        CheckResult("deform.dw", rel_error(layer.grad_weights,
                                           numerical_gradient(objective, layer.weights)), LAYER_TOL),
        CheckResult("deform.db", rel_error(layer.grad_bias,
                                           numerical_gradient(objective, layer.bias)), LAYER_TOL),
        CheckResult("deform.doffsets", rel_error(doff, numerical_gradient(objective, offsets)), LAYER_TOL),
    ]


def check_sigmoid(rng: np.random.Generator) -> CheckResult:
    x = np.array([-2.0, 0.0, 3.0]).reshape(1, 1, 1, 3)
    r = rng.standard_normal(x.shape)

    def objective() -> float:
        return float(np.sum(sigmoid_forward(x) * r))

    analytic = sigmoid_backward(sigmoid_forward(x), r)
    return CheckResult("sigmoid.backward", rel_error(analytic, numerical_gradient(objective, x)), LOSS_TOL)


def check_loss(rng: np.random.Generator) -> CheckResult:
    pred = rng.uniform(0.05, 0.95, size=(2, 1, 5, 5))
    target = (rng.uniform(size=pred.shape) < 0.5).astype(np.float64)
    analytic = euclidean_loss_backward(pred, target)
    numeric = numerical_gradient(lambda: euclidean_loss(pred, target), pred)
    return CheckResult("loss.dpred", rel_error(analytic, numeric), LOSS_TOL)


def _same_branch(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def spot_check_network(net: SegNetwork, image: np.ndarray, mask: np.ndarray,
                       rng: np.random.Generator, count: int = 10,
                       max_draws: int = 1000) -> CheckResult:
    """Compare analytic and numeric loss gradients for ``count`` scalar parameters.

    Picks offset-layer weights, biases and ordinary weights in roughly equal
    shares so every parameter family is exercised. A draw whose +-h probe
    moves any relu input or bilinear corner cell across a kink is redrawn:
    a central difference straddling a kink measures the kink, not the slope.
    """
    pred = net.forward(image)
    base = net.branch_pattern()
    net.zero_grad()
    net.backward(euclidean_loss_backward(pred, mask))

    params = net.parameters()
    offset_w = [p for p in params if ".offset." in p[0] and p[0].endswith(".weight")]
    biases = [p for p in params if p[0].endswith(".bias")]
    weights = [p for p in params if ".offset." not in p[0] and p[0].endswith(".weight")]
    families = [offset_w, biases, weights]

    smooth = True

    def objective() -> float:
        nonlocal smooth
        loss = euclidean_loss(net.forward(image), mask)
        smooth = smooth and _same_branch(base, net.branch_pattern())
        return loss

    worst = 0.0
    checked = 0
    for _ in range(max_draws):
        if checked == count:
            break
        family = families[checked % len(families)]
        _, value, grad = family[rng.integers(len(family))]
        i = int(rng.integers(value.size))
        smooth = True
        numeric = numerical_gradient(objective, value, indices=[i])[0]
        if not smooth:
            continue
        worst = max(worst, rel_error(grad.reshape(-1)[i], numeric))
        checked += 1
    if checked < count:
        worst = float("inf")
    return CheckResult("network.params", worst, NETWORK_TOL)


def randomize_offsets(net: SegNetwork, rng: np.random.Generator) -> None:
    """Move offset layers off their zero init so sampled locations avoid G's kinks."""
    for name, layer in net.named_layers():
        if name.endswith(".offset"):
            layer.weights[...] = rng.uniform(-1e-3, 1e-3, size=layer.weights.shape)
            layer.bias[...] = rng.uniform(0.3, 0.7, size=layer.bias.shape) * rng.choice([-1, 1], size=layer.bias.shape)


def check_network(rng: np.random.Generator, size: int = 16) -> CheckResult:
    net = SegNetwork(channels=32, blocks=3, kernel=3, seed=int(rng.integers(2**32)), dtype=np.float64)
    randomize_offsets(net, rng)
    image = rng.uniform(size=(1, 1, size, size))
    mask = (rng.uniform(size=image.shape) < 0.3).astype(np.float64)
    return spot_check_network(net, image, mask, rng)


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = stream(seed, STREAM_GRADCHECK).numpy()
    results = []
    results += check_conv(rng)
    results += check_deform(rng)
    results.append(check_sigmoid(rng))
    results.append(check_loss(rng))
    results.append(check_network(rng))
    return results
