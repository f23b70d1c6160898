"""Driver-side implementation of the engine's DMWP wire protocol.

Handshake: 7 raw bytes (magic ``DMWP``, u16 version, u8 role), answered by
a HELLO_ACK frame.  All frames are ``u32 length + u8 type + payload`` with
length covering the type byte, little-endian.  Step payloads carry entry
lists: ``u16 count`` then ``u8 kind, u8 layer, u8 branch, u32 nbytes,
<tensor frame>`` per entry.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

from .frames import encode_array

MAGIC = b"DMWP"
VERSION = 1
ROLE_DRIVER = 1

T_HELLO_ACK = 0x10
T_CONFIG = 0x11
T_CONFIG_ACK = 0x12
T_REF_LATENT = 0x13
T_REF_ACK = 0x14
T_STEP_REQUEST = 0x15
T_STEP_RESPONSE = 0x16
T_END = 0x17
T_END_ACK = 0x18
T_SCHEDULE = 0x19
T_ERROR = 0x7F

K_FEATURE = 1
K_CROSS_ATTN = 2
K_VALUE = 3
K_QUERY = 4
K_KEY = 5
K_LATENT = 6
K_EPS = 7
K_VW = 8
K_MPRIME = 9
K_GRAD = 10

B_REF_COND = 0
B_TGT_COND = 1
B_REF_UNCOND = 2
B_TGT_UNCOND = 3


class EngineError(RuntimeError):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Entry:
    kind: int
    layer: int
    branch: int
    payload: bytes


def pack_frame(frame_type: int, payload: bytes = b"") -> bytes:
    return struct.pack("<IB", len(payload) + 1, frame_type) + payload


def pack_entries(entries: list[Entry]) -> bytes:
    parts = [struct.pack("<H", len(entries))]
    for e in entries:
        parts.append(struct.pack("<BBBI", e.kind, e.layer, e.branch, len(e.payload)))
        parts.append(e.payload)
    return b"".join(parts)


def unpack_entries(payload: bytes, offset: int) -> list[Entry]:
    (count,) = struct.unpack_from("<H", payload, offset)
    offset += 2
    entries = []
    for _ in range(count):
        kind, layer, branch, nbytes = struct.unpack_from("<BBBI", payload, offset)
        offset += 7
        entries.append(Entry(kind, layer, branch, payload[offset : offset + nbytes]))
        offset += nbytes
    if offset != len(payload):
        raise EngineError(0x01, "trailing bytes in step payload")
    return entries


def pack_step(t: int, entries: list[Entry]) -> bytes:
    return struct.pack("<I", t) + pack_entries(entries)


def unpack_step(payload: bytes) -> tuple[int, list[Entry]]:
    (t,) = struct.unpack_from("<I", payload, 0)
    return t, unpack_entries(payload, 4)


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("engine closed the connection")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    length, frame_type = struct.unpack("<IB", _recv_exact(sock, 5))
    return frame_type, _recv_exact(sock, length - 1)


class EngineClient:
    """Blocking per-step client; one instance per session."""

    def __init__(self, sock: socket.socket, session_id: int):
        self.sock = sock
        self.session_id = session_id

    @classmethod
    def connect(cls, host: str, port: int) -> "EngineClient":
        sock = socket.create_connection((host, port))
        sock.sendall(MAGIC + struct.pack("<HB", VERSION, ROLE_DRIVER))
        frame_type, payload = read_frame(sock)
        if frame_type == T_ERROR:
            raise EngineError(payload[0], payload[1:].decode("utf-8", "replace"))
        if frame_type != T_HELLO_ACK:
            raise EngineError(0x01, f"unexpected handshake reply 0x{frame_type:02x}")
        _, session_id = struct.unpack("<HI", payload)
        return cls(sock, session_id)

    def _roundtrip(self, frame_type: int, payload: bytes, expect: int) -> bytes:
        self.sock.sendall(pack_frame(frame_type, payload))
        reply_type, reply = read_frame(self.sock)
        if reply_type == T_ERROR:
            raise EngineError(reply[0], reply[1:].decode("utf-8", "replace"))
        if reply_type != expect:
            raise EngineError(0x01, f"expected 0x{expect:02x}, got 0x{reply_type:02x}")
        return reply

    def send_config(self, text: str) -> None:
        self._roundtrip(T_CONFIG, text.encode("utf-8"), T_CONFIG_ACK)

    def send_schedule(self, alphas_cumprod: np.ndarray) -> None:
        self._roundtrip(T_SCHEDULE, encode_array(alphas_cumprod), T_CONFIG_ACK)

    def send_ref_latent(self, latent: np.ndarray) -> None:
        self._roundtrip(T_REF_LATENT, encode_array(latent), T_REF_ACK)

    def step_raw(self, request_payload: bytes) -> bytes:
        return self._roundtrip(T_STEP_REQUEST, request_payload, T_STEP_RESPONSE)

    def step(self, t: int, entries: list[Entry]) -> list[Entry]:
        _, reply = unpack_step(self.step_raw(pack_step(t, entries)))
        return reply

    def end(self) -> None:
        try:
            self._roundtrip(T_END, b"", T_END_ACK)
        finally:
            self.sock.close()

    def close(self) -> None:
        self.sock.close()
