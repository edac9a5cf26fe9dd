"""Framed messages for the public classical channel.

Wire layout, little-endian::

    [length u32][type u8][session u64][payload]

``length`` counts the type byte, the session id and the payload, so an empty
frame has length 9 and occupies 13 bytes. The channel is public and assumed
authenticated; nothing is encrypted.

Any reliable ordered byte stream can carry the frames. Two are provided: an
in-process loopback pipe and a socket wrapper.
"""

from __future__ import annotations

import enum
import socket
import struct
import threading
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Protocol

HEADER = struct.Struct("<IBQ")
HEADER_SIZE = HEADER.size  # 13
LENGTH_OVERHEAD = 9
MAX_PAYLOAD = 16 * 1024 * 1024


class MessageType(enum.IntEnum):
    HELLO = 1
    BASIS_ANNOUNCE = 2
    SIFT_MASK = 3
    SAMPLE_REQUEST = 4
    SAMPLE_REVEAL = 5
    PARITY_QUERY = 6
    PARITY_REPLY = 7
    PA_SEED = 8
    KEY_DIGEST = 9
    ABORT = 255


class ProtocolError(Exception):
    """Malformed frame or unexpected message; the session must abort."""


class IncompleteFrame(ProtocolError):
    pass


class SessionAborted(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class Message:
    msg_type: MessageType
    session_id: int
    payload: bytes = b""


def encode_frame(msg: Message) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(msg.payload)} bytes exceeds {MAX_PAYLOAD}")
    if not 0 <= msg.session_id < 2**64:
        raise ProtocolError("session id must fit in 64 bits")
    return HEADER.pack(len(msg.payload) + LENGTH_OVERHEAD, int(msg.msg_type), msg.session_id) + msg.payload


def decode_frame(buf: bytes | bytearray | memoryview) -> tuple[Message, int]:
    """Decode one frame from the front of ``buf``; return it with the bytes consumed.

    Raises ``IncompleteFrame`` (consuming nothing) when ``buf`` holds less than a frame.
    """
    if len(buf) < HEADER_SIZE:
        raise IncompleteFrame(f"need {HEADER_SIZE} header bytes, have {len(buf)}")
    length, raw_type, session = HEADER.unpack_from(buf)
    if length < LENGTH_OVERHEAD or length - LENGTH_OVERHEAD > MAX_PAYLOAD:
        raise ProtocolError(f"bad frame length {length}")
    try:
        msg_type = MessageType(raw_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {raw_type}") from None
    end = 4 + length
    if len(buf) < end:
        raise IncompleteFrame(f"need {end} bytes, have {len(buf)}")
    return Message(msg_type, session, bytes(buf[HEADER_SIZE:end])), end


class StreamDecoder:
    """Incremental decoder; feed arbitrary chunks, collect whole messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        while True:
            try:
                msg, used = decode_frame(self._buf)
            except IncompleteFrame:
                return out
            del self._buf[:used]
            out.append(msg)

    @property
    def pending(self) -> int:
        return len(self._buf)


def decode_stream(chunks: Iterable[bytes]) -> Iterator[Message]:
    dec = StreamDecoder()
    for chunk in chunks:
        yield from dec.feed(chunk)
    if dec.pending:
        raise IncompleteFrame(f"{dec.pending} trailing bytes do not form a frame")


# -- byte streams -------------------------------------------------------------

class ByteStream(Protocol):
    def write(self, data: bytes) -> None: ...

    def read(self, max_bytes: int) -> bytes:
        """Block until data is available; ``b""`` means end of stream."""
        ...

    def close(self) -> None: ...


class _Pipe:
    def __init__(self):
        self.buf = bytearray()
        self.closed = False
        self.cond = threading.Condition()


class LoopbackStream:
    """One end of an in-process duplex pipe."""

    def __init__(self, inbox: _Pipe, outbox: _Pipe):
        self._in = inbox
        self._out = outbox

    def write(self, data: bytes) -> None:
        with self._out.cond:
            if self._out.closed:
                raise BrokenPipeError("loopback peer closed")
            self._out.buf += data
            self._out.cond.notify_all()

    def read(self, max_bytes: int = 65536) -> bytes:
        with self._in.cond:
            while not self._in.buf and not self._in.closed:
                self._in.cond.wait()
            data = bytes(self._in.buf[:max_bytes])
            del self._in.buf[:max_bytes]
            return data

    def close(self) -> None:
        for pipe in (self._in, self._out):
            with pipe.cond:
                pipe.closed = True
                pipe.cond.notify_all()


def loopback_pair() -> tuple[LoopbackStream, LoopbackStream]:
    a_to_b, b_to_a = _Pipe(), _Pipe()
    return LoopbackStream(b_to_a, a_to_b), LoopbackStream(a_to_b, b_to_a)


class SocketStream:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def write(self, data: bytes) -> None:
        self.sock.sendall(data)

    def read(self, max_bytes: int = 65536) -> bytes:
        return self.sock.recv(max_bytes)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def socket_pair() -> tuple[SocketStream, SocketStream]:
    a, b = socket.socketpair()
    return SocketStream(a), SocketStream(b)


# -- message endpoint ---------------------------------------------------------

class Transcript:
    """Raw frames in the order they crossed the wire, as seen from one endpoint."""

    def __init__(self):
        self.frames: list[bytes] = []

    def record(self, frame: bytes) -> None:
        self.frames.append(frame)

    def to_bytes(self) -> bytes:
        return b"".join(self.frames)

    def messages(self) -> list[Message]:
        return list(decode_stream([self.to_bytes()]))

    def write(self, fh: BinaryIO) -> None:
        fh.write(self.to_bytes())


def read_transcript(data: bytes) -> list[Message]:
    return list(decode_stream([data]))


class Endpoint:
    """Message-level view of a byte stream for one session."""

    def __init__(self, stream: ByteStream, session_id: int, transcript: Transcript | None = None):
        self.stream = stream
        self.session_id = session_id
        self.transcript = transcript
        self._decoder = StreamDecoder()
        self._ready: list[Message] = []
        self.sent: dict[MessageType, int] = {}

    def send(self, msg_type: MessageType, payload: bytes = b"") -> None:
        frame = encode_frame(Message(msg_type, self.session_id, payload))
        if self.transcript is not None:
            self.transcript.record(frame)
        self.sent[msg_type] = self.sent.get(msg_type, 0) + 1
        self.stream.write(frame)

    def recv(self) -> Message:
        while not self._ready:
            chunk = self.stream.read(65536)
            if not chunk:
                raise ProtocolError("stream closed mid-session")
            try:
                self._ready.extend(self._decoder.feed(chunk))
            except ProtocolError as exc:
                self.abort(str(exc))
                raise
        msg = self._ready.pop(0)
        if self.transcript is not None:
            self.transcript.record(encode_frame(msg))
        if msg.session_id != self.session_id:
            self.abort("session id mismatch")
            raise ProtocolError(f"frame for session {msg.session_id}, expected {self.session_id}")
        if msg.msg_type is MessageType.ABORT:
            raise SessionAborted(msg.payload.decode("utf-8", "replace"))
        return msg

    def expect(self, msg_type: MessageType) -> Message:
        msg = self.recv()
        if msg.msg_type is not msg_type:
            self.abort(f"expected {msg_type.name}, got {msg.msg_type.name}")
            raise ProtocolError(f"expected {msg_type.name}, got {msg.msg_type.name}")
        return msg

    def abort(self, reason: str) -> None:
        try:
            self.send(MessageType.ABORT, reason.encode("utf-8")[:1024])
        except OSError:
            pass
