"""Adam with decoupled weight decay over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    weight_decay: float = 0.0


class AdamW:
    """Adam with decoupled weight decay.

    Each step first shrinks every parameter by ``(1 - lr * weight_decay)``
    and then applies the bias-corrected Adam update. Learning rates are
    passed per step so schedules live with the caller.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15, weight_decay: float = 0.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = OptimizerState(weight_decay=weight_decay)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lrs: Dict[str, float]) -> None:
        st = self.state
        st.step += 1
        bc1 = 1.0 - self.beta1**st.step
        bc2 = 1.0 - self.beta2**st.step
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            m = st.m.get(name)
            if m is None or m.shape != p.shape:
                m = st.m[name] = np.zeros_like(p)
                st.v[name] = np.zeros_like(p)
            v = st.v[name]
            lr = lrs[name]
            if st.weight_decay:
                p *= 1.0 - lr * st.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def remap_rows(self, source: np.ndarray, fresh: np.ndarray) -> None:
        """Reorder moment rows after the population changed.

        ``source[i]`` is the old row feeding new row ``i``; rows flagged in
        ``fresh`` start with zero moments.
        """
        for store in (self.state.m, self.state.v):
            for name, arr in store.items():
                new = arr[source].copy()
                new[fresh] = 0.0
                store[name] = new

    def pad_last_axis(self, name: str, size: int) -> None:
        """Zero-extend the last axis of one parameter's moments (SH degree growth)."""
        for store in (self.state.m, self.state.v):
            if name in store:
                arr = store[name]
                pad = [(0, 0)] * (arr.ndim - 1) + [(0, size - arr.shape[-1])]
                store[name] = np.pad(arr, pad)
