"""Order-preserving parallel map with a serial fallback.

Every task in this package carries its own derived seed, so fanning tasks
out to worker processes returns results identical to the serial path; the
pool only changes wall-clock time.
"""

from __future__ import annotations

import multiprocessing


def starmap(fn, tasks, jobs=1):
    """Apply ``fn`` over argument tuples, preserving input order."""
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(*task) for task in tasks]
    try:
        ctx = multiprocessing.get_context("fork")
    except ValueError:
        ctx = multiprocessing.get_context()
    with ctx.Pool(processes=min(int(jobs), len(tasks))) as pool:
        return pool.starmap(fn, tasks)
