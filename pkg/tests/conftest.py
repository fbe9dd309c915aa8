import sys

import numpy as np
import pytest

import nodulemtl.model as model
from nodulemtl.tensor import Tensor, backward

FD_STEP = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def numeric_grad(f, t: Tensor, index=None, step: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``t`` (all entries, or just ``index``)."""
    flat = t.data.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        hi = float(f().data)
        flat[i] = old - step
        lo = float(f().data)
        flat[i] = old
        out[k] = (hi - lo) / (2 * step)
    return out


def check_gradients(f, inputs, floor: float = 1e-6) -> float:
    """Worst relative error over every entry of every input tensor."""
    for t in inputs:
        t.grad = None
    backward(f())
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        worst = max(worst, rel_error(analytic.reshape(-1), numeric_grad(f, t), floor))
    return worst


def projected(out: Tensor, rng) -> Tensor:
    """Random linear functional of ``out``, so every output entry matters."""
    return (out * rng.uniform(-1, 1, out.shape)).sum()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


class KinkProbe:
    """Records which side of every ReLU/max-pool kink the activations sit on."""

    def __init__(self, monkeypatch):
        self.pattern = []
        relu, pool = model.relu, model.max_pool_xy

        def relu_rec(h):
            self.pattern.append(h.data > 0)
            return relu(h)

        def pool_rec(h):
            b, c, z, y, x = h.shape
            win = h.data.reshape(b, c, z, y // 2, 2, x // 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
            self.pattern.append(win.reshape(b, c, z, y // 2, x // 2, 4).argmax(axis=-1))
            return pool(h)

        monkeypatch.setattr(model, "relu", relu_rec)
        monkeypatch.setattr(model, "max_pool_xy", pool_rec)

    def run(self, f):
        self.pattern = []
        value = float(f().data)
        return value, self.pattern


def sampled_gradient_check(f, params, analytic, probe: KinkProbe, rng, n: int = 20,
                           step: float = 1e-6, floor: float = 1e-4) -> tuple[float, int, int]:
    """Central differences on ``n`` randomly drawn parameter entries.

    Entries whose perturbation moves any ReLU or max-pool across its kink
    are skipped, since the derivative there is one-sided.
    Returns (worst relative error, entries checked, entries skipped).
    """
    _, base = probe.run(f)
    order = rng.permutation([(i, j) for i, p in enumerate(params) for j in range(p.size)])
    worst, checked, skipped = 0.0, 0, 0
    for i, j in order:
        flat = params[i].data.reshape(-1)
        old = flat[j]
        flat[j] = old + step
        hi, pat_hi = probe.run(f)
        flat[j] = old - step
        lo, pat_lo = probe.run(f)
        flat[j] = old
        if not all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(base, pat_hi, pat_lo)):
            skipped += 1
            continue
        worst = max(worst, rel_error(analytic[i].reshape(-1)[j], (hi - lo) / (2 * step), floor))
        checked += 1
        if checked == n:
            break
    return worst, checked, skipped


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.summary_lines():
        terminalreporter.write_line(line)
