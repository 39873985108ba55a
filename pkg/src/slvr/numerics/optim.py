"""Bias-corrected Adam over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Tensor], AdamState]:
    """One Adam update. Returns fresh parameter tensors and the advanced state.

    Parameters with no gradient are treated as having a zero gradient.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    t = state.step + 1
    new_m, new_v, new_params = {}, {}, {}
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = beta1 * state.m.get(name, np.zeros_like(p.data)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p.data)) + (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = Tensor(p.data - update, requires_grad=p.requires_grad)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


class Adam:
    """Stateful convenience wrapper around :func:`adam_step`."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self, params: dict[str, Tensor]) -> dict[str, Tensor]:
        grads = {k: p.grad for k, p in params.items()}
        new, self.state = adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        return new

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([float(self.state.step)])}
        for k, m in self.state.m.items():
            out[f"opt.m.{k}"] = m
            out[f"opt.v.{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        st = AdamState(step=int(arrays["opt.step"][0]) if "opt.step" in arrays else 0)
        for k, v in arrays.items():
            if k.startswith("opt.m."):
                st.m[k[len("opt.m."):]] = np.array(v)
            elif k.startswith("opt.v."):
                st.v[k[len("opt.v."):]] = np.array(v)
        self.state = st
