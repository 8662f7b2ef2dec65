"""Deterministic discrete-event queue."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Any


class EventKind(str, Enum):
    ARRIVAL = "Arrival"
    DEPARTURE = "Departure"
    QKD_SESSION_DUE = "QkdSessionDue"
    CONSENSUS_TIMER = "ConsensusTimer"
    MESSAGE_DELIVERY = "MessageDelivery"
    ATTACK_TRIGGER = "AttackTrigger"
    BLOCK_TIMER = "BlockTimer"


@dataclass(order=True)
class SimEvent:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(compare=False, default=None)


class EventQueue:
    """Min-heap on (time, insertion sequence); equal times pop in FIFO order."""

    def __init__(self) -> None:
        self._heap: list[SimEvent] = []
        self._seq = 0
        self.now = 0.0

    def schedule(self, time: float, kind: EventKind, payload: Any = None) -> SimEvent:
        if time < self.now:
            raise ValueError(f"cannot schedule at {time} before now={self.now}")
        event = SimEvent(time, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> SimEvent:
        event = heapq.heappop(self._heap)
        self.now = event.time
        return event

    def peek_time(self) -> float | None:
        return self._heap[0].time if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)
