# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from logging import Logger, getLogger
from typing import Callable, Iterable, Sequence, TypeVar

U = TypeVar("U")
R = TypeVar("R")


def exception_logger(exception: Exception, log: Logger) -> bool:
    """Logs an exception raised by a unit of work. Returns False so the pool re-raises it."""
    log.error("Monte Carlo unit failed: ", exc_info=exception)
    return False


class TrialPool:
    """
    A pool of worker threads for seeded Monte Carlo units.

    Every unit carries its own random-stream key, so results only depend on the units
    themselves: `map` returns them in submission order whatever the number of threads.
    """

    def __init__(
        self,
        threads: int = 1,
        log: Logger | None = None,
        exception_handler: Callable[[Exception, Logger], bool] | None = exception_logger,
    ) -> None:
        if threads < 1:
            raise ValueError(f"threads must be >= 1, got {threads}")
        self.threads = threads
        self.log = log or getLogger(__name__)
        self._exception_handler = exception_handler
        self._executor: ThreadPoolExecutor | None = None

    def __enter__(self) -> TrialPool:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def map(self, fn: Callable[[U], R], units: Iterable[U]) -> list[R]:
        """Runs `fn` on every unit and returns the results in order."""
        units = list(units)
        self.log.debug("Running %s unit(s) on %s thread(s)", len(units), self.threads)
        try:
            if self.threads == 1 or len(units) <= 1:
                return [fn(unit) for unit in units]
            if self._executor is None:
                self._executor = ThreadPoolExecutor(self.threads, thread_name_prefix="qlonn")
            return list(self._executor.map(fn, units))
        except Exception as e:
            if self._exception_handler is not None and self._exception_handler(e, self.log):
                return []
            raise

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def chunked(count: int, size: int) -> Sequence[slice]:
    """Fixed-size slices of range(count); independent of the worker count."""
    return [slice(start, min(start + size, count)) for start in range(0, count, size)]
