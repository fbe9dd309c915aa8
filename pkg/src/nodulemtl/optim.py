"""Bias-corrected ADAM over a fixed list of parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, state: AdamState | None = None):
        self.params = list(params)
        self.state = state or AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        if not self.state.m:
            self.state.m = [np.zeros_like(p.data) for p in self.params]
            self.state.v = [np.zeros_like(p.data) for p in self.params]
        if len(self.state.m) != len(self.params) or any(
            m.shape != p.shape for m, p in zip(self.state.m, self.params)
        ):
            raise ConfigError("optimizer state does not match the parameter list")
        # fresh temporaries on multi-million-element arrays cost more than the math
        self._scratch = [np.empty_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, allow_missing: bool = False) -> None:
        """Apply one update.

        A parameter with no gradient raises :class:`UsageError` unless
        ``allow_missing`` is set, in which case it is treated as a zero
        gradient (its moments still decay).
        """
        st = self.state
        st.step_count += 1
        t = st.step_count
        bc1 = 1.0 - st.beta1**t
        bc2 = 1.0 - st.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                if not allow_missing:
                    raise UsageError(f"parameter {i} has no gradient")
                g = np.zeros_like(p.data)
            m, v, tmp = st.m[i], st.v[i], self._scratch[i]
            m *= st.beta1
            np.multiply(g, 1.0 - st.beta1, out=tmp)
            m += tmp
            v *= st.beta2
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - st.beta2
            v += tmp
            # p -= lr * (m / bc1) / (sqrt(v / bc2) + eps)
            np.multiply(v, 1.0 / bc2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += st.eps
            np.divide(m, tmp, out=tmp)
            tmp *= st.lr / bc1
            p.data -= tmp


def adam_step(params: Sequence[Tensor], state: AdamState) -> AdamState:
    """Functional form: update ``params`` in place from their ``grad`` slots."""
    Adam(params, state=state).step()
    return state
