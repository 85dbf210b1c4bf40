"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad


def _scalarize(out: Tensor, proj: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out
    return ops.sum_(ops.mul(out, Tensor(proj)))


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of `f(*inputs)` with central differences.

    Non-scalar outputs are reduced with a fixed random projection, which
    checks the full vector-Jacobian product. The error per input is
    max|analytic - numeric| / max(max|numeric|, max|analytic|, 1e-12);
    the largest over all inputs is returned. With `max_coords`, only that
    many randomly chosen coordinates per input are perturbed.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    proj = None if out.size == 1 else rng.standard_normal(out.shape).astype(out.dtype)
    backward(_scalarize(out, proj))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value() -> float:
        with no_grad():
            return _scalarize(f(*inputs), proj).item()

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * h)
        an = ga.reshape(-1)[idx]
        denom = max(np.max(np.abs(num), initial=0.0), np.max(np.abs(an), initial=0.0), 1e-12)
        worst = max(worst, float(np.max(np.abs(an - num), initial=0.0) / denom))
    for t in inputs:
        t.grad = None
    return worst
