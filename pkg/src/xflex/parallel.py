"""Replication-level parallelism, capped by the XFLEX_THREADS environment
variable (default 1: serial and deterministic)."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

from .exceptions import ValidationError


def n_jobs_from_env() -> int:
    raw = os.environ.get("XFLEX_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"XFLEX_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValidationError(f"XFLEX_THREADS must be >= 1, got {n}")
    return n


def map_replications(fn, jobs, n_jobs: int | None = None) -> list:
    """Run fn over jobs, preserving order; processes when n_jobs > 1.

    Results are keyed by job index so scheduling cannot change the output.
    """
    jobs = list(jobs)
    if n_jobs is None:
        n_jobs = n_jobs_from_env()
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs))) as pool:
        return list(pool.map(fn, jobs))
