"""
Order-preserving parallel map over independent work items.
"""
from typing import Callable, Iterable, List, Optional

from joblib import Parallel, delayed

from utils.config import Config


def parallel_map(fn: Callable, items: Iterable, n_jobs: Optional[int] = None) -> List:
    """
    Apply ``fn`` to every item, optionally with joblib workers.

    Results come back in input order, so the output is identical to the
    sequential loop. ``n_jobs == 1`` runs the plain loop.
    """
    n_jobs = Config.N_JOBS if n_jobs is None else n_jobs
    items = list(items)
    if n_jobs == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return Parallel(n_jobs=n_jobs, prefer="threads")(delayed(fn)(item) for item in items)
