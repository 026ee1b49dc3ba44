import random
import socket
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from pipeforge.transport.broker import Broker, task_id_of
from pipeforge.transport.framing import (
    MAX_FRAME,
    Disconnected,
    Envelope,
    FrameTooLarge,
    MalformedJson,
    SerializationError,
    decode_body,
    decode_frames,
    encode_body,
    encode_frame,
    read_frame,
    send_frame,
)
from pipeforge.transport.tcp import BrokerServer, parse_address


# -- framing ------------------------------------------------------------------

def test_frame_layout():
    assert encode_frame({}) == b"\x00\x00\x00\x02{}"
    assert encode_frame({"b": 1, "a": 2}) == b"\x00\x00\x00\x0d" + b'{"a":2,"b":1}'


def test_frame_size_limit():
    # a JSON string adds two quote characters
    assert len(encode_frame("x" * (MAX_FRAME - 2))) == MAX_FRAME + 4
    with pytest.raises(FrameTooLarge):
        encode_frame("x" * (MAX_FRAME - 1))
    with pytest.raises(FrameTooLarge):
        decode_frames((MAX_FRAME + 1).to_bytes(4, "big") + b"{}")


def test_partial_buffers():
    stream = encode_frame({"a": 1}) + encode_frame([1, 2, 3])
    got, rest = [], b""
    for i in range(len(stream)):
        frames, rest = decode_frames(rest + stream[i:i + 1])
        got.extend(frames)
    assert got == [{"a": 1}, [1, 2, 3]] and rest == b""
    frames, rest = decode_frames(stream[:7])
    assert frames == [] and rest == stream[:7]


def test_malformed_and_unserializable():
    with pytest.raises(MalformedJson):
        decode_frames(b"\x00\x00\x00\x03{x}")
    with pytest.raises(MalformedJson):
        decode_body(b"\xff\xfe")
    with pytest.raises(SerializationError):
        encode_body({"x": float("nan")})
    with pytest.raises(SerializationError):
        Envelope("Bogus", None, "w", 0)
    with pytest.raises(SerializationError):
        Envelope.from_dict({"kind": "Heartbeat"})


JSON = st.recursive(
    st.none() | st.booleans() | st.integers(-2**53, 2**53) | st.floats(allow_nan=False, allow_infinity=False)
    | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=5) | st.dictionaries(st.text(max_size=8), inner, max_size=5),
    max_leaves=30,
)


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.text(max_size=8), JSON, max_size=6), st.integers(0, 2**31))
def test_envelope_round_trip_is_byte_identical(payload, seq):
    env = Envelope("CompletedTask", payload, "w1", seq)
    frame = encode_frame(env.to_dict())
    (decoded,), rest = decode_frames(frame)
    again = Envelope.from_dict(decoded)
    assert rest == b"" and again == env
    assert encode_frame(again.to_dict()) == frame


def test_socket_frames_and_disconnect():
    a, b = socket.socketpair()
    send_frame(a, {"kind": "Heartbeat"})
    assert read_frame(b) == {"kind": "Heartbeat"}
    a.close()
    with pytest.raises(Disconnected):
        read_frame(b)
    b.close()


def test_parse_address():
    assert parse_address("10.0.0.2:5555") == ("10.0.0.2", 5555)
    assert parse_address(":7000") == ("127.0.0.1", 7000)
    with pytest.raises(ValueError):
        parse_address("localhost")


# -- broker -------------------------------------------------------------------

def _task(i):
    return Envelope("NewTask", {"task": {"task_id": f"t{i:03d}"}}, "coordinator", i)


def _done(task_env, worker="w"):
    return Envelope("CompletedTask", {"task_id": task_id_of(task_env)}, worker, 0)


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def test_prefetch_of_one_and_release():
    broker = Broker()
    for i in range(3):
        broker.publish_task(_task(i))
    first = broker.consume_task("w1", timeout=0)
    assert broker.consume_task("w1", timeout=0) is first
    assert task_id_of(broker.consume_task("w2", timeout=0)) == "t001"
    broker.complete("w1", _done(first))
    assert task_id_of(broker.consume_task("w1", timeout=0)) == "t002"
    assert broker.get_completed(timeout=0).payload == {"task_id": "t000"}
    assert broker.get_completed(timeout=0) is None


def test_silent_consumer_is_redelivered():
    clock = FakeClock()
    broker = Broker(redelivery_timeout=60.0, clock=clock)
    broker.publish_task(_task(0))
    env = broker.consume_task("w1", timeout=0)
    clock.now = 59.0
    broker.heartbeat("w1")
    clock.now = 100.0
    assert broker.consume_task("w2", timeout=0) is None
    clock.now = 119.5
    assert task_id_of(broker.consume_task("w2", timeout=0)) == task_id_of(env)
    assert broker.redeliveries == 1
    # the late original result is still published; deduplication is the coordinator's job
    broker.complete("w1", _done(env, "w1"))
    broker.complete("w2", _done(env, "w2"))
    assert broker.counts() == {"pending": 0, "leased": 0, "completed": 2}


def test_lost_consumer_goes_first_in_line():
    broker = Broker()
    broker.publish_task(_task(0))
    broker.publish_task(_task(1))
    broker.consume_task("w1", timeout=0)
    broker.consumer_lost("w1")
    assert task_id_of(broker.consume_task("w2", timeout=0)) == "t000"


def test_close_sends_shutdown():
    broker = Broker()
    broker.publish_task(_task(0))
    broker.close()
    assert broker.consume_task("w1", timeout=0).kind == "Shutdown"
    assert broker.drop_pending() == 1


def test_chaos_every_task_completes_once():
    broker = Broker()
    n_tasks = 100
    for i in range(n_tasks):
        broker.publish_task(_task(i))
    rng = random.Random(7)
    rng_lock = threading.Lock()

    def worker(slot):
        generation = 0
        while True:
            wid = f"w{slot}-{generation}"
            env = broker.consume_task(wid, timeout=0.05)
            if env is None:
                continue
            if env.kind == "Shutdown":
                return
            with rng_lock:
                crash = rng.random() < 0.2
            if crash:
                # the process dies mid-task; a replacement starts under a new id
                broker.consumer_lost(wid)
                generation += 1
                continue
            broker.complete(wid, _done(env, wid))

    threads = [threading.Thread(target=worker, args=(s,), daemon=True) for s in range(4)]
    for t in threads:
        t.start()
    seen = set()
    deadline = time.monotonic() + 30
    while len(seen) < n_tasks and time.monotonic() < deadline:
        env = broker.get_completed(timeout=0.1)
        if env is not None:
            seen.add(env.payload["task_id"])
    broker.close()
    for t in threads:
        t.join(timeout=5)
    assert seen == {f"t{i:03d}" for i in range(n_tasks)}
    assert broker.redeliveries > 0


# -- TCP server ---------------------------------------------------------------

def _connect(server, worker):
    sock = socket.create_connection(parse_address(server.endpoint), timeout=5)
    send_frame(sock, Envelope("Heartbeat", {"worker": worker, "ready": False}, worker, 0).to_dict())
    return sock


def _wait(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() > deadline:
            raise AssertionError("condition not reached")
        time.sleep(0.02)


def test_tcp_handshake_requeue_and_shutdown():
    broker = Broker()
    server = BrokerServer(broker, ("127.0.0.1", 0))
    server.start()
    try:
        broker.publish_task(_task(0))
        sock = _connect(server, "a")
        send_frame(sock, Envelope("Heartbeat", {"ready": True}, "a", 0).to_dict())
        got = Envelope.from_dict(read_frame(sock))
        assert got.kind == "NewTask" and task_id_of(got) == "t000"
        _wait(lambda: server.n_workers == 1)
        sock.close()  # worker dies holding the task
        _wait(lambda: broker.counts()["pending"] == 1)

        sock = _connect(server, "b")
        send_frame(sock, Envelope("Heartbeat", {"ready": True}, "b", 0).to_dict())
        again = Envelope.from_dict(read_frame(sock))
        assert task_id_of(again) == "t000"
        send_frame(sock, _done(again, "b").to_dict())
        assert broker.get_completed(timeout=5).payload == {"task_id": "t000"}
        send_frame(sock, Envelope("Heartbeat", {"ready": True}, "b", 0).to_dict())
        broker.close()
        assert Envelope.from_dict(read_frame(sock)).kind == "Shutdown"
        sock.close()
        _wait(lambda: server.n_workers == 0)
    finally:
        server.stop()
