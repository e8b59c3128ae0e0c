"""Adam with bias correction, keyed by parameter name.

Keying by name (rather than object identity) lets the pruning code slice
moment buffers in lockstep with the weights they belong to, and lets
checkpoints store optimizer state next to the parameters.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params):
        """Apply one update to ``params`` (name -> Tensor) using their ``.grad``.

        Raises NumericError and leaves everything untouched if any gradient is
        non-finite. Parameters without a gradient are skipped.
        """
        st = self.state
        live = {n: p for n, p in params.items() if p.grad is not None}
        for name, p in live.items():
            if p.grad.shape != p.data.shape:
                raise ConfigError(f"gradient shape {p.grad.shape} != parameter {name} {p.shape}")
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for {name}; step aborted")
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in live.items():
            g = p.grad
            m = st.m.get(name)
            if m is None or m.shape != p.data.shape:
                m = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            v = st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            st.m[name] = m
            upd = (st.lr / c1) * m / (np.sqrt(v / c2) + st.eps)
            p.data -= upd.astype(p.data.dtype, copy=False)

    def zero_grad(self, params):
        for p in params.values():
            p.grad = None

    def slice_param(self, name, axis, keep):
        """Keep only indices ``keep`` along ``axis`` of the moments of ``name``."""
        for buf in (self.state.m, self.state.v):
            if name in buf:
                buf[name] = np.ascontiguousarray(np.take(buf[name], keep, axis=axis))

    def forget(self, names):
        for name in names:
            self.state.m.pop(name, None)
            self.state.v.pop(name, None)

    def prune_missing(self, params):
        gone = [n for n in self.state.m if n not in params]
        self.forget(gone)
