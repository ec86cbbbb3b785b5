"""Central finite-difference checks for every layer kind.

Used by the test-suite and by ``stenomil selftest``.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from . import ops
from .autograd import Tensor, backward


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error, scaled by the larger operand."""
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / denom)


def check_gradients(build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray], step: float = 1e-5) -> float:
    """Largest relative error between autodiff and finite differences over all inputs.

    ``build`` maps leaf tensors to a scalar loss tensor.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(leaves))
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

        def f():
            return float(build([Tensor(t.data) for t in leaves]).data)

        num = numeric_grad(f, leaf.data, step)
        worst = max(worst, rel_error(analytic, num))
    return worst


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def layer_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """Small random 64-bit cases, one per layer kind, each reduced to a scalar by a random probe."""
    cases: dict[str, tuple[Callable, list[np.ndarray]]] = {}

    p = _probe(rng, (3, 4, 2, 2))
    cases["conv3d"] = (
        lambda t: (ops.conv3d(t[0], t[1], t[2], stride=(1, 2, 2), pad=1) * p).sum(),
        [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((3, 2, 3, 2, 2)), rng.standard_normal(3)],
    )
    p1 = _probe(rng, (3, 4))
    cases["conv1d"] = (
        lambda t: (ops.conv1d(t[0], t[1], t[2], stride=2, pad=1) * p1).sum(),
        [rng.standard_normal((2, 7)), rng.standard_normal((3, 2, 3)), rng.standard_normal(3)],
    )
    p2 = _probe(rng, (2, 5, 5, 3))
    cases["conv3d_transposed"] = (
        lambda t: (ops.conv3d_transposed(t[0], t[1], t[2], stride=(2, 2, 1), pad=1, output_padding=(0, 0, 0)) * p2).sum(),
        [rng.standard_normal((3, 3, 3, 3)), rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(2)],
    )
    p3 = _probe(rng, (2, 9))
    cases["conv1d_transposed"] = (
        lambda t: (ops.conv1d_transposed(t[0], t[1], t[2], stride=2, pad=1, output_padding=1) * p3).sum(),
        [rng.standard_normal((3, 4)), rng.standard_normal((3, 2, 4)), rng.standard_normal(2)],
    )
    p4 = _probe(rng, (4, 5))
    cases["dense"] = (
        lambda t: (ops.dense(t[0], t[1], t[2]) * p4).sum(),
        [rng.standard_normal((4, 6)), rng.standard_normal((5, 6)), rng.standard_normal(5)],
    )
    # keep inputs away from the kink at 0
    x = rng.standard_normal((4, 5))
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    p5 = _probe(rng, (4, 5))
    cases["prelu"] = (
        lambda t: (ops.prelu(t[0], t[1], axis=-1) * p5).sum(),
        [x, rng.uniform(0.05, 0.5, 5)],
    )
    p6 = _probe(rng, 6)
    cases["softmax"] = (
        lambda t: ((ops.softmax(t[0]) * p6).sum() * 3.0).tanh(),
        [rng.standard_normal(6)],
    )
    y = (rng.random(5) < 0.5).astype(float)
    cases["sigmoid_bce"] = (
        lambda t: ops.bce_loss(ops.sigmoid(t[0]), y),
        [rng.standard_normal(5)],
    )
    cases["gaussian_kl"] = (
        lambda t: ops.gaussian_kl(t[0], t[1]),
        [rng.standard_normal((3, 4)), rng.uniform(-1, 1, (3, 4))],
    )
    w_att = _probe(rng, (4, 1))
    cases["attention_pool"] = (
        lambda t: (ops.softmax((ops.tanh(t[0] @ t[1]) @ Tensor(w_att)).reshape(-1)).reshape(1, -1) @ t[0]).sum(),
        [rng.standard_normal((5, 3)), rng.standard_normal((3, 4))],
    )
    return cases


def run_gradient_suite(seed: int = 0, tol: float = 1e-4) -> dict[str, float]:
    """Return ``{layer: max relative error}``; raises AssertionError if any exceeds ``tol``."""
    rng = np.random.default_rng(seed)
    errors = {name: check_gradients(build, arrays) for name, (build, arrays) in layer_cases(rng).items()}
    bad = {k: v for k, v in errors.items() if not v <= tol}
    if bad:
        raise AssertionError(f"gradient check failed: {bad}")
    return errors
