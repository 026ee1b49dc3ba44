"""In-memory broker with two queues: new tasks (competing consumers) and completed tasks.

Delivery is at-least-once. Each consumer holds at most one unacknowledged
task; publishing its completion acknowledges it. A task goes back to the
front of the queue when its consumer disconnects or stays silent for longer
than ``redelivery_timeout`` seconds. The coordinator deduplicates by task id.
"""
from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable

from pipeforge.transport.framing import Envelope

logger = logging.getLogger(__name__)

NEW_TASKS = "new_tasks"
COMPLETED_TASKS = "completed_tasks"
DEFAULT_REDELIVERY_TIMEOUT = 60.0
HEARTBEAT_INTERVAL = 10.0


def task_id_of(envelope: Envelope) -> str:
    return envelope.payload["task"]["task_id"]


@dataclass
class _Lease:
    envelope: Envelope
    last_seen: float


class Broker:
    def __init__(self, redelivery_timeout: float = DEFAULT_REDELIVERY_TIMEOUT,
                 clock: Callable[[], float] = time.monotonic):
        self.redelivery_timeout = redelivery_timeout
        self._clock = clock
        self._cond = threading.Condition()
        self._pending: deque[Envelope] = deque()
        self._completed: deque[Envelope] = deque()
        self._leases: dict[str, _Lease] = {}
        self._closed = False
        self.redeliveries = 0

    # -- producer side -----------------------------------------------------

    def publish(self, queue: str, envelope: Envelope, consumer_id: str | None = None) -> None:
        if queue == NEW_TASKS:
            self.publish_task(envelope)
        elif queue == COMPLETED_TASKS:
            self.complete(consumer_id or envelope.sender, envelope)
        else:
            raise ValueError(f"unknown queue {queue!r}")

    def publish_task(self, envelope: Envelope) -> None:
        with self._cond:
            self._pending.append(envelope)
            self._cond.notify_all()

    def complete(self, consumer_id: str, envelope: Envelope) -> None:
        """Publish a completion and release the consumer's lease if it matches."""
        task_id = envelope.payload["task_id"]
        with self._cond:
            lease = self._leases.get(consumer_id)
            if lease is not None and task_id_of(lease.envelope) == task_id:
                del self._leases[consumer_id]
            self._completed.append(envelope)
            self._cond.notify_all()

    # -- consumer side -----------------------------------------------------

    def consume_task(self, consumer_id: str, timeout: float | None = None) -> Envelope | None:
        """Next task for ``consumer_id``, a Shutdown envelope once closed, or None on timeout."""
        deadline = None if timeout is None else self._clock() + timeout
        with self._cond:
            while True:
                self._reap()
                if self._closed:
                    return Envelope("Shutdown", None, "broker", 0)
                lease = self._leases.get(consumer_id)
                if lease is not None:
                    # prefetch of one: hand back the task this consumer still owes
                    lease.last_seen = self._clock()
                    return lease.envelope
                if self._pending:
                    env = self._pending.popleft()
                    self._leases[consumer_id] = _Lease(env, self._clock())
                    return env
                remaining = None if deadline is None else deadline - self._clock()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(0.25 if remaining is None else min(remaining, 0.25))

    def heartbeat(self, consumer_id: str) -> None:
        with self._cond:
            lease = self._leases.get(consumer_id)
            if lease is not None:
                lease.last_seen = self._clock()

    def consumer_lost(self, consumer_id: str) -> None:
        with self._cond:
            lease = self._leases.pop(consumer_id, None)
            if lease is not None:
                logger.info("consumer %s lost; requeueing %s", consumer_id, task_id_of(lease.envelope))
                self._pending.appendleft(lease.envelope)
                self.redeliveries += 1
                self._cond.notify_all()

    def _reap(self) -> None:
        now = self._clock()
        expired = [c for c, l in self._leases.items() if now - l.last_seen > self.redelivery_timeout]
        for cid in expired:
            lease = self._leases.pop(cid)
            logger.warning("consumer %s silent for %.0fs; requeueing %s", cid, now - lease.last_seen,
                           task_id_of(lease.envelope))
            self._pending.appendleft(lease.envelope)
            self.redeliveries += 1
        if expired:
            self._cond.notify_all()

    # -- coordinator side --------------------------------------------------

    def consume(self, queue: str, consumer_id: str, timeout: float | None = None) -> Envelope | None:
        if queue == NEW_TASKS:
            return self.consume_task(consumer_id, timeout)
        if queue == COMPLETED_TASKS:
            return self.get_completed(timeout)
        raise ValueError(f"unknown queue {queue!r}")

    def get_completed(self, timeout: float | None = None) -> Envelope | None:
        deadline = None if timeout is None else self._clock() + timeout
        with self._cond:
            while not self._completed:
                self._reap()
                remaining = None if deadline is None else deadline - self._clock()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(0.25 if remaining is None else min(remaining, 0.25))
            return self._completed.popleft()

    def drop_pending(self) -> int:
        with self._cond:
            n = len(self._pending)
            self._pending.clear()
            return n

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def counts(self) -> dict[str, int]:
        with self._cond:
            return {"pending": len(self._pending), "leased": len(self._leases), "completed": len(self._completed)}
