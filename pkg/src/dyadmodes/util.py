"""Small shared helpers: deterministic parallel mapping and seed derivation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> list[R]:
    """Map fn over items, optionally on a thread pool.

    Results are collected by item index, so the output is identical for any
    worker count. Suitable for numpy-heavy fn that release the GIL.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    out: list = [None] * len(items)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = {pool.submit(fn, it): i for i, it in enumerate(items)}
        for fut, i in futures.items():
            out[i] = fut.result()
    return out


def derived_rng(seed: int, *path) -> np.random.Generator:
    """Generator for a named sub-stream of the run seed.

    Strings in path are folded to stable integers so streams are isolated per
    (seed, label) and independent of execution order.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for p in path:
        if isinstance(p, str):
            h = 2166136261
            for ch in p.encode():
                h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
            key.append(h)
        else:
            key.append(int(p) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))


def format_float(x: float) -> str:
    """Shortest round-trip decimal form, stable across runs."""
    return repr(float(x))
