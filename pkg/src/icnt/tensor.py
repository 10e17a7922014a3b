"""Tensor container and the operation tape used for reverse-mode gradients."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEBUG = bool(os.environ.get("ICNT_DEBUG"))

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """An n-d float array with an optional gradient buffer.

    ``data`` is always a C-contiguous float32 or float64 ndarray.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
                + (f" ({self.name})" if self.name else "")
            )
        g = g.astype(self.data.dtype, copy=False)
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


Backward = Callable[[np.ndarray, tuple], tuple]


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Backward
    op: str


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; ops executed inside the block whose inputs
    require gradients are recorded. ``backward`` replays them in reverse.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STACK.remove(self)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Backward, op: str) -> None:
        self.nodes.append(_Node(out, tuple(inputs), backward, op))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if loss.data.size != 1:
                raise ValueError(
                    f"backward from a non-scalar output of shape {loss.shape} needs an explicit seed"
                )
            seed = np.ones_like(loss.data)
        loss.accumulate_grad(np.asarray(seed, dtype=loss.dtype))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            grads = node.backward(g, needs)
            for t, gi, need in zip(node.inputs, grads, needs):
                if need and gi is not None:
                    t.accumulate_grad(np.asarray(gi))
        self.nodes.clear()


_STACK: list[Tape] = []


def current_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


def emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Backward, op: str) -> Tensor:
    """Wrap an op result, recording it on the active tape when any input needs a gradient."""
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward, op)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
