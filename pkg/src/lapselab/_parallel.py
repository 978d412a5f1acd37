import os

ENV_THREADS = "LAPSELAB_THREADS"


def worker_count(requested: int | None = None) -> int:
    """Number of workers: explicit request, else LAPSELAB_THREADS, else CPU count."""
    if requested is not None and requested > 0:
        return int(requested)
    try:
        n = int(os.environ.get(ENV_THREADS, "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)
