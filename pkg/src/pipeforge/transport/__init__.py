"""Message passing between the coordinator and workers (in-process or over TCP)."""
from pipeforge.transport.broker import COMPLETED_TASKS, NEW_TASKS, Broker
from pipeforge.transport.framing import (
    MAX_FRAME,
    Disconnected,
    Envelope,
    FrameTooLarge,
    MalformedJson,
    SerializationError,
    decode_frames,
    encode_frame,
    read_frame,
    send_frame,
)

__all__ = [
    "COMPLETED_TASKS", "NEW_TASKS", "Broker", "MAX_FRAME", "Disconnected", "Envelope", "FrameTooLarge",
    "MalformedJson", "SerializationError", "decode_frames", "encode_frame", "read_frame", "send_frame",
]
