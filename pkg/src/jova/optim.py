"""Adaptive-moment (Adam) parameter updates over named tensors."""

from __future__ import annotations

import numpy as np


class TrainingError(RuntimeError):
    """Raised when training hits a numerically invalid state."""


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, in place on `params`.

    params: dict name -> Tensor (leaves); grads: dict name -> ndarray.
    Parameters without a gradient entry are left untouched (their moments
    still decay). NaN gradients abort with the current step index.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise TrainingError(
                f"non-finite gradient for '{name}' at step {state.step}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
