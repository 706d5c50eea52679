"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from pir.autodiff.rng import make_rng
from pir.autodiff.tensor import Tensor, no_grad

ZERO_FLOOR = 1e-5


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, coords: np.ndarray,
                   step: float = 1e-5) -> np.ndarray:
    flat = x.data.reshape(-1)
    out = np.empty(len(coords))
    with no_grad():
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            plus = fn().item()
            flat[i] = orig - step
            minus = fn().item()
            flat[i] = orig
            out[n] = (plus - minus) / (2.0 * step)
    return out


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
                    max_coords: int | None = 32, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the current values of ``inputs`` to a scalar.  For each input
    the error is ``max|analytic - numeric| / max|numeric|`` over the checked
    coordinates (all of them, or a seeded subset of ``max_coords``); the
    result is the largest over inputs.  The denominator never drops below
    ``1e-5 * max(1, |f|)`` so a gradient that is exactly zero (for instance
    a key bias under softmax shift invariance) is not judged on the
    round-off noise of its finite differences.
    """
    rng = rng or make_rng(0)
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    value = fn()
    floor = ZERO_FLOOR * max(1.0, abs(value.item()))
    value.backward()
    worst = 0.0
    for x in inputs:
        analytic = x.grad.reshape(-1) if x.grad is not None else np.zeros(x.size)
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))
        numeric = numerical_grad(fn, x, coords, step)
        scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic[coords])), floor)
        worst = max(worst, float(np.max(np.abs(analytic[coords] - numeric)) / scale))
    return worst


def gradcheck(op: Callable[..., Tensor], shapes: Sequence[tuple[int, ...]], seed: int,
              step: float = 1e-5, max_coords: int | None = 32,
              sampler: Callable[[np.random.Generator, tuple[int, ...]], np.ndarray] | None = None
              ) -> float:
    """Check ``op`` on random inputs of the given shapes.

    The op output is reduced to a scalar by a fixed random projection so
    every output element contributes.
    """
    rng = make_rng(seed)
    sampler = sampler or (lambda r, s: r.standard_normal(s))
    inputs = [Tensor(sampler(rng, s), requires_grad=True) for s in shapes]
    with no_grad():
        probe_shape = op(*inputs).shape
    projection = Tensor(rng.standard_normal(probe_shape))

    def scalar():
        return (op(*inputs) * projection).sum()

    return check_gradients(scalar, inputs, step=step, max_coords=max_coords, rng=rng)
