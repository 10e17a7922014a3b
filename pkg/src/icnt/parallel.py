"""Process-wide compute worker pool.

The pool size is fixed once per run. Ops split their batch (or row)
dimension into contiguous chunks, one per worker, and reduce partial
results in chunk order so a given thread count is always reproducible.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np
from threadpoolctl import threadpool_limits

T = TypeVar("T")

_pool: ThreadPoolExecutor | None = None
_threads: int | None = None
_blas_limit = None


def set_worker_threads(n: int) -> None:
    """Fix the worker count used by numeric ops.

    BLAS is pinned to one thread per caller so that all parallelism comes
    from this pool and the reduction order depends only on ``n``.
    """
    global _pool, _threads, _blas_limit
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"worker thread count must be an integer >= 1, got {n!r}")
    if _threads is not None:
        raise RuntimeError(
            f"worker pool already created with {_threads} thread(s); "
            "set_worker_threads must be called once before training"
        )
    _threads = int(n)
    _blas_limit = threadpool_limits(limits=1)
    if _threads > 1:
        _pool = ThreadPoolExecutor(max_workers=_threads, thread_name_prefix="icnt")


def shutdown_workers() -> None:
    """Tear the pool down so a later run may choose a new size."""
    global _pool, _threads, _blas_limit
    if _pool is not None:
        _pool.shutdown(wait=True)
    if _blas_limit is not None:
        _blas_limit.restore_original_limits()
    _pool = None
    _threads = None
    _blas_limit = None


def worker_threads() -> int:
    return _threads or 1


def threads_from_env(default: int = 8) -> int:
    raw = os.environ.get("ICNT_THREADS")
    if raw is None or raw.strip() == "":
        return default
    return int(raw)


def chunk_slices(n_items: int, n_chunks: int | None = None) -> list[slice]:
    k = min(n_chunks or worker_threads(), n_items)
    k = max(k, 1)
    bounds = np.linspace(0, n_items, k + 1).round().astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def map_chunks(fn: Callable[[slice], T], n_items: int) -> list[T]:
    """Apply ``fn`` to contiguous chunks of ``range(n_items)``; results in chunk order."""
    slices = chunk_slices(n_items)
    if _pool is None or len(slices) == 1:
        return [fn(s) for s in slices]
    return list(_pool.map(fn, slices))


def map_items(fn: Callable[[T], object], items: Sequence[T]) -> list:
    """Order-preserving map over independent items (e.g. image decoding)."""
    if _pool is None or len(items) <= 1:
        return [fn(it) for it in items]
    return list(_pool.map(fn, items))


def ordered_sum(parts: Sequence[np.ndarray]) -> np.ndarray:
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total
