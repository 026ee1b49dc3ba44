"""Length-prefixed JSON frames and message envelopes.

A frame is a 4-byte big-endian body length followed by a UTF-8 JSON body.
"""
from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass
from typing import Any

MAX_FRAME = 16 * 1024 * 1024
KINDS = ("NewTask", "CompletedTask", "Heartbeat", "Shutdown")
_HEADER = struct.Struct(">I")


class TransportError(Exception):
    pass


class FrameTooLarge(TransportError):
    pass


class MalformedJson(TransportError):
    pass


class SerializationError(TransportError):
    pass


class Disconnected(TransportError):
    pass


@dataclass
class Envelope:
    kind: str
    payload: Any
    sender: str
    seq: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SerializationError(f"unknown envelope kind {self.kind!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "payload": self.payload, "sender": self.sender, "seq": self.seq}

    @classmethod
    def from_dict(cls, d: Any) -> "Envelope":
        if not isinstance(d, dict) or not {"kind", "payload", "sender", "seq"} <= d.keys():
            raise SerializationError("envelope needs kind, payload, sender and seq")
        return cls(d["kind"], d["payload"], str(d["sender"]), int(d["seq"]))


def encode_body(obj: Any) -> bytes:
    try:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise SerializationError(str(exc)) from None


def encode_frame(obj: Any) -> bytes:
    body = encode_body(obj)
    if len(body) > MAX_FRAME:
        raise FrameTooLarge(f"body of {len(body)} bytes exceeds {MAX_FRAME}")
    return _HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> Any:
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedJson(str(exc)) from None


def decode_frames(buffer: bytes) -> tuple[list[Any], bytes]:
    """Split complete frames off the front of ``buffer``; return them and the remainder."""
    out = []
    while len(buffer) >= 4:
        (size,) = _HEADER.unpack_from(buffer)
        if size > MAX_FRAME:
            raise FrameTooLarge(f"announced body of {size} bytes exceeds {MAX_FRAME}")
        if len(buffer) < 4 + size:
            break
        out.append(decode_body(buffer[4:4 + size]))
        buffer = buffer[4 + size:]
    return out, buffer


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise Disconnected("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Any:
    (size,) = _HEADER.unpack(_recv_exact(sock, 4))
    if size > MAX_FRAME:
        raise FrameTooLarge(f"announced body of {size} bytes exceeds {MAX_FRAME}")
    return decode_body(_recv_exact(sock, size))


def send_frame(sock: socket.socket, obj: Any) -> None:
    try:
        sock.sendall(encode_frame(obj))
    except OSError as exc:
        raise Disconnected(str(exc)) from None
