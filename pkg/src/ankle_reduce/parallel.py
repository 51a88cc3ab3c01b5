"""Worker count for the parallel KD-tree queries.

Queries are independent per point, so any worker count gives bit-identical
results. BLAS threads are a different matter: multithreaded reductions
change the summation order, which is why the CLI pins BLAS to one thread.
"""
from __future__ import annotations

import os

_workers = 1


def set_workers(n: int | None) -> None:
    """``None`` or 0 means one worker per CPU."""
    global _workers
    _workers = int(n) if n else (os.cpu_count() or 1)


def workers() -> int:
    return _workers
