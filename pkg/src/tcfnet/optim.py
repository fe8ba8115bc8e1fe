"""ADAM with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Parameter


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Iterable[Parameter], grads: Mapping[str, np.ndarray], state: AdamState
) -> AdamState:
    """Apply one ADAM update to every trainable parameter.

    Parameter arrays are replaced, never written in place, so tensors held by
    a stale graph keep their forward values.
    """
    trainable = [p for p in params if p.trainable]
    missing = [p.name for p in trainable if p.name not in grads]
    if missing:
        raise KeyError(f"adam_step: no gradient for trainable parameter(s) {missing}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in trainable:
        g = np.asarray(grads[p.name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {p.name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[p.name] = m
        state.v[p.name] = v
        p.tensor.data = p.tensor.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
