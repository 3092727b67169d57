"""Adam with bias correction and coupled (L2-in-gradient) weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..autodiff import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    decay: Callable[[str], bool] = lambda name: True,
) -> tuple[dict[str, Tensor], AdamState]:
    """One Adam update. Returns fresh parameter tensors; ``state`` is advanced in place.

    ``decay(name)`` selects which tensors receive the weight-decay term.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != p.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {np.shape(g)}, parameter {p.shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = np.asarray(grads.get(name, np.zeros(p.shape)), dtype=np.float64)
        if state.weight_decay and decay(name):
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = Tensor(p.data - update, requires_grad=p.requires_grad)
    return out, state
