"""Seeded block scheduling for ensembles.

Samples are split into fixed-size blocks. Block ``k`` of stream ``tag`` draws
from ``PCG64(SeedSequence(seed, spawn_key=(tag, k)))`` and results are
concatenated in block order, so the output depends only on the master seed and
never on how many workers ran the blocks.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

BLOCK_SIZE = 512

STREAM_NET = 0
STREAM_SDE = 1
STREAM_ORACLE = 2
STREAM_OUTPUT = 3


def block_rng(seed: int, block: int, tag: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(tag), int(block)))
    return np.random.Generator(np.random.PCG64(ss))


def block_sizes(samples: int, block_size: int = BLOCK_SIZE) -> list[int]:
    if samples < 1:
        raise ValueError("samples must be >= 1")
    full, rest = divmod(samples, block_size)
    return [block_size] * full + ([rest] if rest else [])


def worker_count() -> int:
    """Worker cap from COVSDE_THREADS, else the CPU count."""
    raw = os.environ.get("COVSDE_THREADS")
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ValueError(f"COVSDE_THREADS must be an integer, got {raw!r}") from None
        return max(1, value)
    return os.cpu_count() or 1


def map_blocks(fn, jobs, workers: int | None = None) -> list:
    """Apply ``fn(*job)`` to each job, preserving job order.

    ``fn`` and its arguments must be picklable when more than one worker is
    used.
    """
    jobs = list(jobs)
    if workers is None:
        workers = worker_count()
    workers = min(workers, len(jobs))
    if workers <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]
