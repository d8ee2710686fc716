"""
Process-pool fan-out shared by the table fitter, the aggregate builder and
both renderers.

Results come back in task order, so any reduction over them is the same for
every worker count. Large read-only objects (scene, BVH, aggregate) travel
once per worker process as a context instead of once per task.
"""

import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Iterable, Optional

import numba
from tqdm import tqdm

from src.utils.logging_setup import configure_logging, progress_enabled

# numba parallel kernels run in the parent; forking after them is unsafe
_START_METHOD = "spawn"

_context: dict[str, Any] = {}


def _install(context: dict, log_level: Optional[int] = None) -> None:
    if log_level is not None:
        # pool workers run numba single-threaded
        configure_logging(log_level)
        numba.set_num_threads(1)
    _context.clear()
    _context.update(context)


def worker_context() -> dict[str, Any]:
    """Shared objects of the running map; tasks may cache derived objects in it."""
    return _context


def run_tasks(
    fn: Callable,
    tasks: Iterable,
    workers: int,
    label: str,
    context: Optional[dict] = None,
    chunksize: int = 1,
) -> list:
    """[fn(task) for task in tasks] on up to ``workers`` processes, in task order."""
    tasks = list(tasks)
    bar = dict(total=len(tasks), desc=label, disable=not progress_enabled())
    if workers <= 1 or len(tasks) < 2:
        previous = dict(_context)
        _install(context or {})
        try:
            return [fn(t) for t in tqdm(tasks, **bar)]
        finally:
            _install(previous)

    workers = min(workers, len(tasks))
    logging.debug(f"{label}: {len(tasks)} task(s) on {workers} worker process(es)")
    pool = ProcessPoolExecutor(
        max_workers=workers,
        mp_context=multiprocessing.get_context(_START_METHOD),
        initializer=_install,
        initargs=(context or {}, logging.getLogger().getEffectiveLevel()),
    )
    with pool:
        return list(tqdm(pool.map(fn, tasks, chunksize=chunksize), **bar))
