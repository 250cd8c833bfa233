"""Order-preserving parallel map used by the multi-start and field builders."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

JOBS_ENV = "MFG_FSOLVE_JOBS"


def resolve_jobs(jobs: int | None = None) -> int:
    """Explicit value, then ``MFG_FSOLVE_JOBS``, then 1."""
    if jobs is None:
        env = os.environ.get(JOBS_ENV, "").strip()
        jobs = int(env) if env else 1
    if jobs < 1:
        raise ValueError(f"jobs must be positive, got {jobs}")
    return jobs


def parallel_map(fn, items, jobs: int | None = None) -> list:
    items = list(items)
    jobs = min(resolve_jobs(jobs), max(len(items), 1))
    if jobs == 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
