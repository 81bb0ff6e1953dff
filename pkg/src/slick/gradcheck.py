"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def directional_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                      rng: np.random.Generator, h: float = 1e-5) -> float:
    """Relative error between the analytic and the central-difference
    directional derivative of ``fn`` along a random direction.

    ``fn`` receives one Tensor per input and must return a scalar Tensor.
    """
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    backward(out)
    dirs = [rng.standard_normal(np.shape(x)) for x in inputs]
    analytic = sum(float(np.sum((leaf.grad if leaf.grad is not None else 0.0) * d))
                   for leaf, d in zip(leaves, dirs))
    plus = fn(*[Tensor(x + h * d) for x, d in zip(inputs, dirs)]).item()
    minus = fn(*[Tensor(x - h * d) for x, d in zip(inputs, dirs)]).item()
    numeric = (plus - minus) / (2 * h)
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-8:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / scale


def params_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                 rng: np.random.Generator, h: float = 1e-5,
                 names: Sequence[str] | None = None) -> float:
    """Directional check of a loss over a parameter dict, perturbing in place."""
    names = list(names if names is not None else params)
    for name in names:
        params[name].grad = None
    backward(loss_fn())
    dirs = {n: rng.standard_normal(params[n].shape) for n in names}
    analytic = sum(float(np.sum((params[n].grad if params[n].grad is not None else 0.0) * dirs[n]))
                   for n in names)
    originals = {n: params[n].data.copy() for n in names}
    try:
        for n in names:
            params[n].data = originals[n] + h * dirs[n]
        plus = loss_fn().item()
        for n in names:
            params[n].data = originals[n] - h * dirs[n]
        minus = loss_fn().item()
    finally:
        for n in names:
            params[n].data = originals[n]
            params[n].grad = None
    numeric = (plus - minus) / (2 * h)
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-8:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / scale
