"""Task consumers: the worker loop shared by in-process threads and TCP worker processes."""
from __future__ import annotations

import json
import logging
import threading

from pipeforge.executor import EvalContext, EvaluationProtocol, Task, prepare_context, run_aps
from pipeforge.transport.broker import Broker
from pipeforge.transport.framing import Envelope

logger = logging.getLogger(__name__)


class ContextCache:
    """Loads the dataset once per distinct evaluation protocol."""

    def __init__(self, dataset_path: str):
        self.dataset_path = dataset_path
        self._lock = threading.Lock()
        self._cache: dict[str, EvalContext] = {}

    def seed(self, ctx: EvalContext) -> None:
        with self._lock:
            self._cache[json.dumps(ctx.protocol.to_dict(), sort_keys=True)] = ctx

    def get(self, protocol: dict) -> EvalContext:
        key = json.dumps(protocol, sort_keys=True)
        with self._lock:
            ctx = self._cache.get(key)
            if ctx is None:
                ctx = prepare_context(EvaluationProtocol.from_dict(protocol), self.dataset_path)
                self._cache[key] = ctx
            return ctx


def execute(envelope: Envelope, contexts: ContextCache, worker_id: str, seq: int) -> Envelope:
    """Run one NewTask envelope and wrap the observation as a CompletedTask envelope."""
    task = Task.from_dict(envelope.payload["task"])
    ctx = contexts.get(envelope.payload["protocol"])
    obs = run_aps(task, ctx, worker_id=worker_id)
    return Envelope("CompletedTask", obs.to_dict(), worker_id, seq)


def inproc_worker(broker: Broker, contexts: ContextCache, worker_id: str) -> None:
    """Consume tasks until the broker shuts down."""
    seq = 0
    while True:
        env = broker.consume_task(worker_id, timeout=1.0)
        if env is None:
            continue
        if env.kind == "Shutdown":
            return
        seq += 1
        try:
            done = execute(env, contexts, worker_id, seq)
        except Exception:  # noqa: BLE001 - keep the thread alive; the task will be redelivered
            logger.exception("worker %s failed to execute a task", worker_id)
            broker.consumer_lost(worker_id)
            continue
        broker.complete(worker_id, done)


def start_inproc_workers(broker: Broker, contexts: ContextCache, n: int, prefix: str = "w") -> list[threading.Thread]:
    threads = []
    for i in range(n):
        t = threading.Thread(target=inproc_worker, args=(broker, contexts, f"{prefix}{i}"), daemon=True,
                             name=f"pipeforge-worker-{i}")
        t.start()
        threads.append(t)
    return threads
