"""Thread-count policy. ``MVP_THREADS`` caps every pool and the BLAS backends."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from threadpoolctl import threadpool_limits


class ThreadSettingError(ValueError):
    pass


def max_threads() -> int:
    raw = os.environ.get("MVP_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ThreadSettingError(f"MVP_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ThreadSettingError(f"MVP_THREADS must be a positive integer, got {raw!r}")
    return n


def limit_blas():
    """Context manager capping native BLAS/OpenMP pools at ``max_threads()``."""
    return threadpool_limits(limits=max_threads())


def ordered_map(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]`` on up to ``workers`` threads; order preserved."""
    items = list(items)
    workers = min(workers or max_threads(), max(len(items), 1))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
