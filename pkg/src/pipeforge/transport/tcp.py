"""TCP front end for the broker and the matching worker client.

Conversation on one connection (worker -> server unless noted)::

    Heartbeat {"worker": id, "ready": false}     hello
    CompletedTask {...}                          optional: a result the last connection could not deliver
    Heartbeat {"ready": true}                    ask for work
      server -> NewTask | Shutdown
    Heartbeat {"ready": false}                   every HEARTBEAT_INTERVAL seconds while computing
    CompletedTask {...}                          result, then ask for work again
"""
from __future__ import annotations

import logging
import os
import select
import socket
import socketserver
import threading
import time
import uuid

from pipeforge.transport.broker import HEARTBEAT_INTERVAL, Broker
from pipeforge.transport.framing import Disconnected, Envelope, TransportError, read_frame, send_frame
from pipeforge.transport.worker import ContextCache, execute

logger = logging.getLogger(__name__)


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


def _peer_closed(sock: socket.socket) -> bool:
    readable, _, _ = select.select([sock], [], [], 0)
    if not readable:
        return False
    try:
        return sock.recv(1, socket.MSG_PEEK) == b""
    except OSError:
        return True


class _Handler(socketserver.BaseRequestHandler):
    server: "BrokerServer"

    def handle(self) -> None:
        sock = self.request
        broker = self.server.broker
        worker = None
        seq = 0
        try:
            hello = Envelope.from_dict(read_frame(sock))
            worker = str(hello.sender)
            logger.info("worker %s connected from %s", worker, self.client_address)
            self.server.connected(worker, +1)
            while True:
                env = Envelope.from_dict(read_frame(sock))
                if env.kind == "CompletedTask":
                    broker.complete(worker, env)
                    continue
                if env.kind == "Heartbeat" and not (env.payload or {}).get("ready"):
                    broker.heartbeat(worker)
                    continue
                if env.kind != "Heartbeat":
                    raise TransportError(f"unexpected {env.kind} from worker")
                task = None
                while task is None:
                    task = broker.consume_task(worker, timeout=0.5)
                    if task is None and _peer_closed(sock):
                        raise Disconnected("worker went away while idle")
                seq += 1
                send_frame(sock, Envelope(task.kind, task.payload, "coordinator", seq).to_dict())
                if task.kind == "Shutdown":
                    return
        except (TransportError, OSError, ValueError, KeyError) as exc:
            if worker is not None:
                logger.info("worker %s disconnected: %s", worker, exc)
        finally:
            if worker is not None:
                broker.consumer_lost(worker)
                self.server.connected(worker, -1)


class BrokerServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, broker: Broker, address: tuple[str, int]):
        self.broker = broker
        self._lock = threading.Lock()
        self.workers: dict[str, int] = {}
        super().__init__(address, _Handler)

    def connected(self, worker: str, delta: int) -> None:
        with self._lock:
            self.workers[worker] = self.workers.get(worker, 0) + delta
            if self.workers[worker] <= 0:
                del self.workers[worker]

    @property
    def n_workers(self) -> int:
        with self._lock:
            return len(self.workers)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.2}, daemon=True,
                             name="pipeforge-broker")
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class _Heartbeat(threading.Thread):
    def __init__(self, sock: socket.socket, lock: threading.Lock, worker: str, interval: float):
        super().__init__(daemon=True)
        self.sock, self.lock, self.worker, self.interval = sock, lock, worker, interval
        self.stop = threading.Event()

    def run(self) -> None:
        while not self.stop.wait(self.interval):
            try:
                with self.lock:
                    send_frame(self.sock, Envelope("Heartbeat", {"ready": False}, self.worker, 0).to_dict())
            except TransportError:
                return


def run_tcp_worker(address: str, dataset_path: str, worker_id: str | None = None,
                   give_up_after: float = 600.0, heartbeat_interval: float = HEARTBEAT_INTERVAL) -> int:
    """Consume tasks from a coordinator until it sends Shutdown.

    Reconnects whenever the connection drops. A result that could not be
    sent is resent first on the next connection. Returns the number of
    tasks executed. Gives up after ``give_up_after`` seconds without a
    connection.
    """
    host, port = parse_address(address)
    worker_id = worker_id or f"{socket.gethostname()}-{os.getpid()}-{uuid.uuid4().hex[:6]}"
    contexts = ContextCache(dataset_path)
    unsent: Envelope | None = None
    executed = 0
    seq = 0
    last_contact = time.monotonic()
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=5.0)
        except OSError:
            if time.monotonic() - last_contact > give_up_after:
                logger.error("no coordinator at %s for %.0fs; giving up", address, give_up_after)
                return executed
            time.sleep(0.5)
            continue
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        lock = threading.Lock()
        try:
            send_frame(sock, Envelope("Heartbeat", {"worker": worker_id, "ready": False}, worker_id, 0).to_dict())
            if unsent is not None:
                send_frame(sock, unsent.to_dict())
                unsent = None
            while True:
                last_contact = time.monotonic()
                with lock:
                    send_frame(sock, Envelope("Heartbeat", {"ready": True}, worker_id, 0).to_dict())
                env = Envelope.from_dict(read_frame(sock))
                last_contact = time.monotonic()
                if env.kind == "Shutdown":
                    return executed
                if env.kind != "NewTask":
                    continue
                beat = _Heartbeat(sock, lock, worker_id, heartbeat_interval)
                beat.start()
                try:
                    seq += 1
                    unsent = execute(env, contexts, worker_id, seq)
                    executed += 1
                finally:
                    beat.stop.set()
                with lock:
                    send_frame(sock, unsent.to_dict())
                unsent = None
        except (TransportError, OSError) as exc:
            logger.info("connection to %s lost (%s); reconnecting", address, exc)
            time.sleep(0.2)
        finally:
            try:
                sock.close()
            except OSError:
                pass
