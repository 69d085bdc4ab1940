"""Request coalescing: one generation per key for all overlapping callers."""

from __future__ import annotations

import asyncio
from typing import Any, Awaitable, Callable, Hashable


class SingleFlight:
    """Group concurrent calls per key so the generator runs once per flight.

    The generator runs in its own task, so a caller being cancelled does not
    cancel the flight for everyone else. The flight is unregistered as soon
    as the generator finishes; later callers start a new flight.
    """

    def __init__(self) -> None:
        self._flights: dict[Hashable, asyncio.Task] = {}
        self.started = 0
        self.joined = 0

    def in_flight(self, key: Hashable) -> bool:
        return key in self._flights

    async def do(self, key: Hashable, fn: Callable[[], Awaitable[Any]]) -> Any:
        task = self._flights.get(key)
        if task is None:
            task = asyncio.ensure_future(self._run(key, fn))
            self._flights[key] = task
            task.add_done_callback(_consume_exception)
            self.started += 1
        else:
            self.joined += 1
        return await asyncio.shield(task)

    async def _run(self, key: Hashable, fn: Callable[[], Awaitable[Any]]) -> Any:
        try:
            return await fn()
        finally:
            self._flights.pop(key, None)


def _consume_exception(task: asyncio.Task) -> None:
    # Avoids "exception was never retrieved" when every waiter was cancelled.
    if not task.cancelled():
        task.exception()
