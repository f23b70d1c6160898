"""Binary wire protocol: an external diffusion loop drives the engine.

Transport is a local byte stream (TCP socket).  All integers little-endian.

Handshake: the client opens with 7 raw bytes — magic ``DMWP``, u16 version,
u8 role — and the server answers with a HELLO_ACK frame carrying the version
and a session id (or an ERROR frame, then closes).

After the handshake everything is framed as ``u32 length + u8 type +
payload`` where length counts the type byte plus the payload.  A session
configures itself (CONFIG carries the same key-value text the CLI reads,
SCHEDULE optionally replaces the default linear alpha-bar sequence,
REF_LATENT caches the reference clean latent), then exchanges one
STEP_REQUEST / STEP_RESPONSE pair per denoising step.

Step payloads are entry lists: ``u16 count`` then per entry ``u8 kind, u8
layer, u8 branch, u32 nbytes, <tensor frame bytes>``.  The request carries
decoder features from the previous evaluation (step t+1), the subject
cross-attention map, per-layer value tensors for both branches, the target
latent and per-CFG-branch target noise predictions.  The response returns
the blended value tensor per layer and CFG branch, the semantic-consistent
mask, and the ready-to-subtract guidance term per CFG branch.

Error frames carry ``u8 code + utf-8 message`` and abort the session:
0x01 malformed, 0x02 shape mismatch, 0x03 version, 0x04 session state.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import frames
from .config import ConfigError, parse_config_text
from .consistency import ConsistencyParams
from .grids import GridError, TensorGrid
from .guidance import (
    NoiseSchedule,
    ScheduleError,
    align_reference_z0,
    guidance_gradient,
    predict_z0,
)
from .attention import matched_values
from .sampler import SessionConfig, build_match_state

MAGIC = b"DMWP"
VERSION = 1
ROLE_DRIVER = 1

# frame types
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

# error codes
E_MALFORMED = 0x01
E_SHAPE = 0x02
E_VERSION = 0x03
E_STATE = 0x04

# step entry kinds
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

# branch tags
B_REF_COND = 0
B_TGT_COND = 1
B_REF_UNCOND = 2
B_TGT_UNCOND = 3

_CFG_BRANCHES = ((B_TGT_UNCOND, B_REF_UNCOND), (B_TGT_COND, B_REF_COND))


class ProtocolError(RuntimeError):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class StepEntry:
    kind: int
    layer: int
    branch: int
    payload: bytes

    def array(self) -> np.ndarray:
        return frames.decode_array(self.payload)


def pack_frame(frame_type: int, payload: bytes = b"") -> bytes:
    return struct.pack("<IB", len(payload) + 1, frame_type) + payload


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = _recv_exact(sock, 5)
    length, frame_type = struct.unpack("<IB", header)
    if length < 1:
        raise ProtocolError(E_MALFORMED, "frame length must cover the type byte")
    payload = _recv_exact(sock, length - 1)
    return frame_type, payload


def pack_entries(entries: list[StepEntry]) -> bytes:
    out = [struct.pack("<H", len(entries))]
    for entry in entries:
        out.append(
            struct.pack("<BBBI", entry.kind, entry.layer, entry.branch, len(entry.payload))
        )
        out.append(entry.payload)
    return b"".join(out)


def unpack_entries(payload: bytes, offset: int = 0) -> list[StepEntry]:
    if len(payload) < offset + 2:
        raise ProtocolError(E_MALFORMED, "entry list truncated")
    (count,) = struct.unpack_from("<H", payload, offset)
    offset += 2
    entries = []
    for _ in range(count):
        if len(payload) < offset + 7:
            raise ProtocolError(E_MALFORMED, "entry header truncated")
        kind, layer, branch, nbytes = struct.unpack_from("<BBBI", payload, offset)
        offset += 7
        if len(payload) < offset + nbytes:
            raise ProtocolError(E_MALFORMED, "entry payload truncated")
        entries.append(StepEntry(kind, layer, branch, payload[offset : offset + nbytes]))
        offset += nbytes
    if offset != len(payload):
        raise ProtocolError(E_MALFORMED, "trailing bytes after entries")
    return entries


def pack_step_request(t: int, entries: list[StepEntry]) -> bytes:
    return struct.pack("<I", t) + pack_entries(entries)


def unpack_step_request(payload: bytes) -> tuple[int, list[StepEntry]]:
    if len(payload) < 4:
        raise ProtocolError(E_MALFORMED, "step request shorter than header")
    (t,) = struct.unpack_from("<I", payload, 0)
    return t, unpack_entries(payload, 4)


# -- engine-side step computation -----------------------------------------


@dataclass
class _SessionState:
    session_id: int
    config: SessionConfig | None = None
    schedule: NoiseSchedule | None = None
    ref_z0: TensorGrid | None = None
    lambda_g: float = 75.0

    def ready(self) -> bool:
        return self.config is not None and self.ref_z0 is not None


def _grid_from(entry: StepEntry, what: str) -> TensorGrid:
    try:
        return frames.decode_grid(entry.payload)
    except frames.FrameError as exc:
        raise ProtocolError(E_MALFORMED, f"bad {what} frame: {exc}") from exc


def compute_step_response(state: _SessionState, t: int, entries: list[StepEntry]) -> bytes:
    """Run matching, value blending and guidance for one step request."""
    assert state.config is not None and state.schedule is not None
    config = state.config
    if not 1 <= t <= state.schedule.total_steps:
        raise ProtocolError(E_SHAPE, f"step {t} outside schedule [1, {state.schedule.total_steps}]")

    feats: dict[int, dict[int, TensorGrid]] = {B_REF_COND: {}, B_TGT_COND: {}}
    values: dict[tuple[int, int], TensorGrid] = {}
    cross: list[TensorGrid] = []
    eps: dict[int, TensorGrid] = {}
    latent: TensorGrid | None = None
    for entry in entries:
        if entry.kind == K_FEATURE:
            if entry.branch not in feats:
                raise ProtocolError(E_MALFORMED, f"feature entry with branch {entry.branch}")
            feats[entry.branch][entry.layer] = _grid_from(entry, "feature")
        elif entry.kind == K_CROSS_ATTN:
            cross.append(_grid_from(entry, "cross-attention"))
        elif entry.kind == K_VALUE:
            values[(entry.layer, entry.branch)] = _grid_from(entry, "value")
        elif entry.kind == K_EPS:
            eps[entry.branch] = _grid_from(entry, "eps")
        elif entry.kind == K_LATENT:
            latent = _grid_from(entry, "latent")
        elif entry.kind in (K_QUERY, K_KEY):
            continue  # accepted for diagnostics; attention runs client-side
        else:
            raise ProtocolError(E_MALFORMED, f"unexpected entry kind {entry.kind}")

    ref_layers = sorted(feats[B_REF_COND])
    if not ref_layers or ref_layers != sorted(feats[B_TGT_COND]):
        raise ProtocolError(E_SHAPE, "feature layers missing or mismatched across branches")
    if not cross:
        raise ProtocolError(E_SHAPE, "step request carries no cross-attention map")
    if latent is None:
        raise ProtocolError(E_SHAPE, "step request carries no target latent")

    try:
        match = build_match_state(
            feats_ref=[feats[B_REF_COND][l] for l in ref_layers],
            feats_tgt=[feats[B_TGT_COND][l] for l in ref_layers],
            cross_attn_maps=cross,
            descriptor_res=(latent.height, latent.width),
            pca_dim=config.pca_dim,
            params=ConsistencyParams(
                lambda_c=config.lambda_c, mask_threshold=config.mask_threshold
            ),
        )
    except (GridError, ValueError) as exc:
        raise ProtocolError(E_SHAPE, f"matching failed: {exc}") from exc

    out_entries: list[StepEntry] = [
        StepEntry(K_MPRIME, 0, B_TGT_COND, frames.encode_mask(match.mask_mprime))
    ]

    layers = sorted({layer for (layer, _) in values})
    for layer in layers:
        for tgt_branch, ref_branch in _CFG_BRANCHES:
            if (layer, tgt_branch) not in values or (layer, ref_branch) not in values:
                continue
            v_tgt = values[(layer, tgt_branch)]
            v_ref = values[(layer, ref_branch)]
            try:
                v_w = matched_values(
                    v_ref,
                    v_tgt,
                    match.flow_at(v_tgt.height, v_tgt.width),
                    match.mprime_at(v_tgt.height, v_tgt.width),
                )
            except (GridError, ValueError) as exc:
                raise ProtocolError(E_SHAPE, f"value blend failed at layer {layer}: {exc}") from exc
            out_entries.append(StepEntry(K_VW, layer, tgt_branch, frames.encode_grid(v_w)))

    if state.ref_z0 is not None and eps:
        try:
            flow_lat = match.flow_at(state.ref_z0.height, state.ref_z0.width)
            mprime_lat = match.mprime_at(state.ref_z0.height, state.ref_z0.width)
            z0_aligned = align_reference_z0(state.ref_z0, flow_lat)
            for branch, eps_grid in sorted(eps.items()):
                z0_hat = predict_z0(latent, eps_grid, t, state.schedule)
                grad = guidance_gradient(z0_aligned, z0_hat, mprime_lat, t, state.schedule)
                term = TensorGrid(
                    state.lambda_g * state.schedule.sigma(t) * grad.data
                    if state.lambda_g > 0.0
                    else np.zeros(grad.shape)
                )
                out_entries.append(StepEntry(K_GRAD, 0, branch, frames.encode_grid(term)))
        except (GridError, ScheduleError, ValueError) as exc:
            raise ProtocolError(E_SHAPE, f"guidance failed: {exc}") from exc

    return pack_step_request(t, out_entries)


# -- server --------------------------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    server: "EngineServer"

    def handle(self) -> None:  # noqa: D102 — socketserver hook
        sock: socket.socket = self.request
        try:
            hello = _recv_exact(sock, 7)
        except ConnectionError:
            return
        if hello[:4] != MAGIC:
            sock.sendall(pack_frame(T_ERROR, bytes([E_MALFORMED]) + b"bad handshake magic"))
            return
        (version,) = struct.unpack("<H", hello[4:6])
        if version != VERSION:
            sock.sendall(
                pack_frame(T_ERROR, bytes([E_VERSION]) + f"version {version} != {VERSION}".encode())
            )
            return
        state = self.server.new_session()
        sock.sendall(pack_frame(T_HELLO_ACK, struct.pack("<HI", VERSION, state.session_id)))
        try:
            self._serve_session(sock, state)
        except (ConnectionError, BrokenPipeError):
            pass  # client disconnect aborts the session cleanly
        finally:
            self.server.drop_session(state.session_id)

    def _serve_session(self, sock: socket.socket, state: _SessionState) -> None:
        while True:
            try:
                frame_type, payload = read_frame(sock)
                if frame_type == T_CONFIG:
                    file_cfg = parse_config_text(payload.decode("utf-8"), source="<wire config>")
                    state.config = file_cfg.session
                    state.lambda_g = file_cfg.session.lambda_g
                    if state.schedule is None:
                        state.schedule = file_cfg.session.schedule()
                    sock.sendall(
                        pack_frame(
                            T_CONFIG_ACK, struct.pack("<I", file_cfg.session.total_steps)
                        )
                    )
                elif frame_type == T_SCHEDULE:
                    arr = frames.decode_array(payload)
                    if arr.ndim != 1:
                        raise ProtocolError(E_SHAPE, "schedule frame must be rank 1")
                    state.schedule = NoiseSchedule(arr.astype(np.float64))
                    sock.sendall(pack_frame(T_CONFIG_ACK, struct.pack("<I", arr.size - 1)))
                elif frame_type == T_REF_LATENT:
                    state.ref_z0 = frames.decode_grid(payload)
                    sock.sendall(pack_frame(T_REF_ACK))
                elif frame_type == T_STEP_REQUEST:
                    if not state.ready():
                        raise ProtocolError(E_STATE, "step before config and reference latent")
                    t, entries = unpack_step_request(payload)
                    sock.sendall(pack_frame(T_STEP_RESPONSE, compute_step_response(state, t, entries)))
                elif frame_type == T_END:
                    sock.sendall(pack_frame(T_END_ACK))
                    return
                else:
                    raise ProtocolError(E_MALFORMED, f"unexpected frame type 0x{frame_type:02x}")
            except ProtocolError as exc:
                sock.sendall(pack_frame(T_ERROR, bytes([exc.code]) + str(exc).encode("utf-8")))
                return
            except (ConfigError, frames.FrameError, ScheduleError, GridError) as exc:
                sock.sendall(pack_frame(T_ERROR, bytes([E_MALFORMED]) + str(exc).encode("utf-8")))
                return


class EngineServer(socketserver.ThreadingTCPServer):
    """One protocol connection per session; sessions are independent."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int]):
        super().__init__(address, _Handler)
        self._lock = threading.Lock()
        self._next_id = 1
        self._sessions: dict[int, _SessionState] = {}

    def new_session(self) -> _SessionState:
        with self._lock:
            state = _SessionState(session_id=self._next_id)
            self._sessions[state.session_id] = state
            self._next_id += 1
            return state

    def drop_session(self, session_id: int) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve(address: tuple[str, int]) -> EngineServer:
    """Start a server thread on `address`; caller shuts it down."""
    server = EngineServer(address)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


# -- client helper (used by tests and tooling) -------------------------------


@dataclass
class WireClient:
    """Minimal driver-side implementation of the protocol."""

    sock: socket.socket
    session_id: int = 0

    @classmethod
    def connect(cls, host: str, port: int, version: int = VERSION) -> "WireClient":
        sock = socket.create_connection((host, port))
        sock.sendall(MAGIC + struct.pack("<HB", version, ROLE_DRIVER))
        client = cls(sock=sock)
        frame_type, payload = read_frame(sock)
        if frame_type == T_ERROR:
            code = payload[0]
            raise ProtocolError(code, payload[1:].decode("utf-8", "replace"))
        if frame_type != T_HELLO_ACK:
            raise ProtocolError(E_MALFORMED, f"unexpected handshake reply 0x{frame_type:02x}")
        _, client.session_id = struct.unpack("<HI", payload)
        return client

    def _roundtrip(self, frame_type: int, payload: bytes, expect: int) -> bytes:
        self.sock.sendall(pack_frame(frame_type, payload))
        reply_type, reply = read_frame(self.sock)
        if reply_type == T_ERROR:
            raise ProtocolError(reply[0], reply[1:].decode("utf-8", "replace"))
        if reply_type != expect:
            raise ProtocolError(E_MALFORMED, f"expected 0x{expect:02x}, got 0x{reply_type:02x}")
        return reply

    def send_config(self, text: str) -> None:
        self._roundtrip(T_CONFIG, text.encode("utf-8"), T_CONFIG_ACK)

    def send_schedule(self, alphas_cumprod: np.ndarray) -> None:
        self._roundtrip(T_SCHEDULE, frames.encode_array(alphas_cumprod), T_CONFIG_ACK)

    def send_ref_latent(self, grid: TensorGrid) -> None:
        self._roundtrip(T_REF_LATENT, frames.encode_grid(grid), T_REF_ACK)

    def step(self, t: int, entries: list[StepEntry]) -> tuple[int, list[StepEntry]]:
        reply = self._roundtrip(T_STEP_REQUEST, pack_step_request(t, entries), T_STEP_RESPONSE)
        return unpack_step_request(reply)

    def end(self) -> None:
        self._roundtrip(T_END, b"", T_END_ACK)

    def close(self) -> None:
        self.sock.close()
