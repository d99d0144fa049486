"""Adaptive-moment optimizer with bias correction."""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "Adam", "NonFiniteGradientError"]


class NonFiniteGradientError(RuntimeError):
    """A gradient contained NaN or inf; names the offending parameter."""


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, param: np.ndarray):
        self.m = np.zeros_like(param)
        self.v = np.zeros_like(param)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, *,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int = 1, name: str = "<param>") -> None:
    """One in-place update. Deterministic given inputs."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ValueError(f"adam_step: shape mismatch for {name}: "
                         f"param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1 ** t)
    vhat = state.v / (1.0 - beta2 ** t)
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)


class Adam:
    """Adam over a named parameter dict, with optional per-name lr multipliers.

    Parameters with a zero multiplier are frozen (their state does not
    advance either, so they stay bit-identical).
    """

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_mult: Optional[Dict[str, float]] = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_mult = lr_mult or {}
        self.t = 0
        self.state = {name: AdamState(p.data) for name, p in params.items()}

    def _mult(self, name: str) -> float:
        best = 1.0
        best_len = -1
        for prefix, m in self.lr_mult.items():
            if name == prefix or name.startswith(prefix + "."):
                if len(prefix) > best_len:
                    best, best_len = m, len(prefix)
        return best

    def step(self) -> None:
        self.t += 1
        for name in sorted(self.params):
            p = self.params[name]
            mult = self._mult(name)
            if mult == 0.0 or p.grad is None:
                continue
            adam_step(p.data, p.grad, self.state[name],
                      lr=self.lr * mult, beta1=self.beta1, beta2=self.beta2,
                      eps=self.eps, t=self.t, name=name)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
