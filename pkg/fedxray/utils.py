from typing import List
import functools
import hashlib
import time

from fedxray.loggers import setup_logger

logger = setup_logger(__name__)


def chunks(lst: List, n: int):
    for i in range(0, len(lst), n):
        yield lst[i : i + n]


def time_function(func):
    """
    Decorator that measures and logs the execution time of a function.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        result = func(*args, **kwargs)
        logger.debug(f"{func.__name__} executed in {time.perf_counter() - start_time:.6f} seconds.")
        return result

    return wrapper


class Stopwatch:
    """Context manager; `seconds` holds the elapsed wall time after exit."""

    def __init__(self) -> None:
        self.seconds = 0.0
        self._start = None

    def __enter__(self) -> "Stopwatch":
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.seconds = time.perf_counter() - self._start


def sha256_file(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
