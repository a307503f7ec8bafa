"""Counter-based random streams.

Every path ``p`` of an ensemble draws from its own Philox stream keyed by
``(master, stream ^ p)``, so a draw is a pure function of (master, stream,
path, position) and chunking or worker count never changes the numbers.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

U64 = 1 << 64
CHUNK = 256  # paths per work unit; fixed so results never depend on workers


@dataclass(frozen=True)
class Seed:
    master: int
    stream: int = 0

    def __post_init__(self):
        for name in ("master", "stream"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) < U64:
                raise ValueError(f"seed {name} must be an unsigned 64-bit integer")

    def offset(self, k: int) -> "Seed":
        """Disjoint stream family, e.g. the second planar component."""
        return Seed(self.master, (self.stream + k) % U64)

    def to_dict(self) -> dict:
        return {"master": int(self.master), "stream": int(self.stream)}


def as_seed(seed) -> Seed:
    if isinstance(seed, Seed):
        return seed
    if isinstance(seed, dict):
        return Seed(int(seed["master"]), int(seed.get("stream", 0)))
    return Seed(int(seed))


def generator(seed: Seed, p: int = 0) -> np.random.Generator:
    key = int(seed.master) | ((int(seed.stream) ^ int(p)) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def normal_rows(seed: Seed, start: int, stop: int, dim: int) -> np.ndarray:
    """Standard normals, one row of length ``dim`` per path in [start, stop)."""
    out = np.empty((stop - start, dim))
    for r, p in enumerate(range(start, stop)):
        out[r] = generator(seed, p).standard_normal(dim)
    return out


def worker_count() -> int:
    try:
        n = int(os.environ.get("TOOL_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


def chunked(n: int, fn, chunk: int = CHUNK):
    """Apply ``fn(start, stop)`` over fixed chunks of ``range(n)``, in order.

    Chunks may run on a thread pool (``TOOL_THREADS``); the list of results is
    always in chunk order, so reductions are reproducible.
    """
    bounds = [(a, min(a + chunk, n)) for a in range(0, n, chunk)]
    workers = min(worker_count(), len(bounds)) or 1
    if workers == 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))
