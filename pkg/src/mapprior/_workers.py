import os

THREADS_ENV = "MAPPRIOR_THREADS"


def max_workers() -> int:
    """Worker count: ``MAPPRIOR_THREADS`` if set, else the CPU count."""
    cpus = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return cpus
    try:
        n = int(raw)
    except ValueError:
        return cpus
    return max(1, n)
