"""Shared fixtures for the overlay QoS tests."""

import heapq
import itertools
import sys
from pathlib import Path
from typing import Callable, List, Tuple

import pytest

# Add the parent directory to the path so we can import our modules
sys.path.append(str(Path(__file__).parent.parent))

from src.events import EventLog  # noqa: E402
from src.packets import Packet  # noqa: E402


class ManualScheduler:
    """Minimal virtual clock for driving endpoint and DC logic without a network."""

    def __init__(self):
        self.now = 0
        self._queue: List[Tuple[int, int, Callable[[], None]]] = []
        self._order = itertools.count()

    def __call__(self, t: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._queue, (t, next(self._order), fn))

    def run_until(self, t_end: int) -> None:
        while self._queue and self._queue[0][0] <= t_end:
            t, _, fn = heapq.heappop(self._queue)
            self.now = t
            fn()
        self.now = max(self.now, t_end)

    @property
    def pending(self) -> int:
        return len(self._queue)


class Outbox:
    """Collects packets handed to a transmit callback."""

    def __init__(self):
        self.sent: List[Tuple[int, Packet]] = []

    def __call__(self, pkt: Packet, now: int) -> None:
        self.sent.append((now, pkt))

    def of_kind(self, kind) -> List[Packet]:
        return [p for _, p in self.sent if p.kind == kind]

    def clear(self) -> None:
        self.sent.clear()


@pytest.fixture
def scheduler():
    yield ManualScheduler()


@pytest.fixture
def outbox():
    yield Outbox()


@pytest.fixture
def events():
    yield EventLog("full")
