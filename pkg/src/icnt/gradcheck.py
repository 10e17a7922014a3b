"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from .tensor import Tape, Tensor


def _scalarize(out: np.ndarray, seed: np.ndarray | None) -> float:
    if seed is None:
        return float(out.reshape(-1)[0])
    return float(np.sum(out * seed))


class CheckResult(NamedTuple):
    max_rel_error: float
    input_position: int
    index: tuple[int, ...]


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: np.ndarray | None = None,
    wrt: Sequence[int] | None = None,
) -> float:
    """Return the max relative error between tape and finite-difference gradients.

    ``fn(*inputs)`` must return a scalar Tensor, or ``seed`` must be given, in
    which case the checked scalar is ``sum(fn(*inputs) * seed)``. The relative
    error of each element uses ``max(|analytic|, |numeric|, 1e-12)`` as the
    denominator. ``wrt`` restricts the check to a subset of input positions.
    """
    return grad_check_detailed(fn, inputs, eps, seed, wrt).max_rel_error


def grad_check_detailed(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: np.ndarray | None = None,
    wrt: Sequence[int] | None = None,
) -> CheckResult:
    """Like :func:`grad_check` but also locate the worst element."""
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 inputs, got {t.dtype} for {t!r}")
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"grad_check input {t!r} contains non-finite values")
    positions = list(range(len(inputs))) if wrt is None else list(wrt)

    saved = [t.requires_grad for t in inputs]
    for i, t in enumerate(inputs):
        t.requires_grad = i in positions
        t.grad = None
    try:
        with Tape() as tape:
            out = fn(*inputs)
            if out.data.size != 1 and seed is None:
                raise ValueError(
                    f"grad_check: output has shape {out.shape}; provide an output seed for non-scalar outputs"
                )
            if out.requires_grad:
                tape.backward(out, None if seed is None else np.asarray(seed, dtype=out.dtype))
        analytic = [
            inputs[i].grad if inputs[i].grad is not None else np.zeros_like(inputs[i].data)
            for i in positions
        ]
    finally:
        for t, flag in zip(inputs, saved):
            t.requires_grad = flag

    worst = CheckResult(0.0, positions[0] if positions else -1, ())
    for i, ga in zip(positions, analytic):
        x = inputs[i].data
        flat = x.reshape(-1)
        ga_flat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = _scalarize(fn(*inputs).data, seed)
            flat[j] = orig - eps
            f_minus = _scalarize(fn(*inputs).data, seed)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(ga_flat[j])
            denom = max(abs(a), abs(numeric), 1e-12)
            err = abs(a - numeric) / denom
            if err > worst.max_rel_error:
                worst = CheckResult(err, i, tuple(int(k) for k in np.unravel_index(j, x.shape)))
    for t in inputs:
        t.grad = None
    return worst
