"""Single-threaded discrete-event scheduler on a virtual nanosecond clock."""

from __future__ import annotations

import heapq
from typing import Any, Callable, List, Tuple


class Scheduler:
    """Min-heap of ``(time, seq)`` ordered callbacks.

    Ties at the same virtual time run in scheduling order, which keeps every
    run a pure function of its inputs.  Background events (periodic pings)
    are counted separately so the harness can tell when real work is done.
    """

    def __init__(self):
        self.now = 0
        self._queue: List[Tuple[int, int, bool, Callable, tuple]] = []
        self._seq = 0
        self._work = 0
        self.executed = 0

    def at(self, time: int, fn: Callable[..., Any], *args, background: bool = False) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        self._seq += 1
        heapq.heappush(self._queue, (time, self._seq, background, fn, args))
        if not background:
            self._work += 1

    def after(self, delay: int, fn: Callable[..., Any], *args, background: bool = False) -> None:
        self.at(self.now + int(delay), fn, *args, background=background)

    @property
    def pending_work(self) -> int:
        return self._work

    def __len__(self):
        return len(self._queue)

    def step(self) -> bool:
        if not self._queue:
            return False
        time, _, background, fn, args = heapq.heappop(self._queue)
        self.now = time
        if not background:
            self._work -= 1
        self.executed += 1
        fn(*args)
        return True

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> None:
        """Run events in time order until the queue empties, ``until`` passes,
        or ``stop()`` becomes true (checked between events)."""
        q = self._queue
        while q:
            if until is not None and q[0][0] > until:
                self.now = until
                return
            if stop is not None and stop():
                return
            self.step()


BACKOFF_INITIAL_NS = 1_000_000
BACKOFF_CAP_NS = 64_000_000


def backoff(attempt: int, initial: int = BACKOFF_INITIAL_NS, cap: int = BACKOFF_CAP_NS) -> int:
    """Retry delay for the given zero-based attempt: 1 ms, doubling, capped at 64 ms."""
    return min(initial << min(attempt, 32), cap)
