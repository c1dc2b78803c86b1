"""Thread-pool runner for independent seeds."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Any

from .errors import ConfigError

logger = logging.getLogger(__name__)

# Environment variable capping the number of parallel workers
THREADS_ENV = "DEVSAFE_THREADS"


def get_max_workers() -> int:
    """Worker count: DEVSAFE_THREADS when set, else the CPU count (at least 1)."""
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return max(1, os.cpu_count() or 1)
    try:
        workers = int(value)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"must be an integer, got {value!r}")
    if workers < 1:
        raise ConfigError(THREADS_ENV, f"must be >= 1, got {workers}")
    return workers


def run_parallel(tasks: list[dict[str, Any]], max_workers: int | None = None) -> tuple[dict[str, Any], dict[str, Exception]]:
    """
    Execute independent tasks in parallel and collect results.

    Args:
        tasks: List of task dictionaries with 'func', 'args' and 'context';
            context['name'] keys the results and labels the progress log
        max_workers: Maximum number of concurrent workers (default: get_max_workers())

    Returns:
        Tuple (results, errors), both keyed by context name
    """
    results: dict[str, Any] = {}
    errors: dict[str, Exception] = {}
    if not tasks:
        return results, errors

    total_tasks = len(tasks)
    completed_tasks = 0
    workers = min(max_workers or get_max_workers(), total_tasks)

    with ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_context = {
            executor.submit(task['func'], *task['args']): task['context']
            for task in tasks
        }

        for future in as_completed(future_to_context):
            context = future_to_context[future]
            completed_tasks += 1
            name = context['name']
            try:
                results[name] = future.result()
                logger.info(f"[{completed_tasks}/{total_tasks}] {name}: done")
            except Exception as e:
                errors[name] = e
                logger.error(f"[{completed_tasks}/{total_tasks}] {name}: Error - {e}")

    return results, errors
