"""Adam with per-group learning rates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

DEFAULT_LR = {
    "albedo": 0.01,
    "roughness": 0.01,
    "normal_offset": 0.001,
    "radiance": 0.0025,
    "opacity": 0.025,
}


@dataclass
class OptimizerState:
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    def __init__(self, lr: dict | None = None, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = OptimizerState(dict(DEFAULT_LR, **(lr or {})), beta1, beta2, eps)

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place for every name present in ``grads``."""
        st = self.state
        st.step_count += 1
        t = st.step_count
        bc1 = 1.0 - st.beta1**t
        bc2 = 1.0 - st.beta2**t
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for '{name}'")
            m = st.m.setdefault(name, np.zeros_like(g))
            v = st.v.setdefault(name, np.zeros_like(g))
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            params[name] -= st.lr[name] * (m / bc1) / (np.sqrt(v / bc2) + st.eps)
