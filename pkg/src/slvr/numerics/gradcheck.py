"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .rng import Rng
from .tensor import Tensor


def numerical_grad(f: Callable[[dict[str, Tensor]], Tensor], point: dict[str, np.ndarray],
                   name: str, flat_idx: int, h: float = 1e-5) -> float:
    plus = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    minus = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    plus[name].reshape(-1)[flat_idx] += h
    minus[name].reshape(-1)[flat_idx] -= h
    fp = f({k: Tensor(v) for k, v in plus.items()}).item()
    fm = f({k: Tensor(v) for k, v in minus.items()}).item()
    return (fp - fm) / (2.0 * h)


def grad_check(f: Callable, point, h: float = 1e-5, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Max over coordinates of |autodiff - FD| / max(1, |FD|).

    ``point`` is an array (``f`` takes one Tensor) or a dict of arrays
    (``f`` takes a dict of Tensors). ``max_coords`` subsamples coordinates
    per input for large parameter sets.
    """
    single = not isinstance(point, dict)
    pts = {"x": np.asarray(point, dtype=np.float64)} if single else {
        k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    call = (lambda d: f(d["x"])) if single else f

    leaves = {k: Tensor(v, requires_grad=True) for k, v in pts.items()}
    out = call(leaves)
    out.backward()

    rng = Rng(seed)
    worst = 0.0
    for name, arr in pts.items():
        g = leaves[name].grad
        g = np.zeros_like(arr) if g is None else g
        idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            idx = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        for i in idx:
            fd = numerical_grad(call, pts, name, int(i), h)
            err = abs(g.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
