"""Binary wire format for remote epsilon predictions.

Every message is a frame: a 4-byte big-endian body length followed by the body. Integers in the
body are big-endian; tensor payloads are little-endian float32.

Request body::

    "VSRQ" | version u32 | model id: len u8 + UTF-8 | step t u32
    | flags u8 (bit 0: null condition, bit 1: auxiliary tensor present)
    | label count u32 (0: none, 1: broadcast, B: one per sample) | labels i32 * count
    | ndim u8 | dims u32 * ndim | [aux kind u8 (1 first_frame, 2 edge) | aux ndim u8 | aux dims u32 * ndim]
    | sample payload f32 LE | [aux payload f32 LE]

Response body::

    "VSRS" | version u32 | status u8
    | ok:    ndim u8 | dims u32 * ndim | payload f32 LE
    | error: message len u16 | UTF-8 message
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

REQUEST_MAGIC = b"VSRQ"
RESPONSE_MAGIC = b"VSRS"
PROTOCOL_VERSION = 1
MAX_FRAME = 256 * 1024 * 1024

FLAG_NULL = 0x01
FLAG_AUX = 0x02
AUX_KINDS = {1: "first_frame", 2: "edge"}
AUX_CODES = {v: k for k, v in AUX_KINDS.items()}


class Status(IntEnum):
    OK = 0
    UNKNOWN_MODEL = 1
    BAD_SHAPE = 2
    BAD_STEP = 3
    INTERNAL = 4


class ProtocolError(ValueError):
    """The bytes do not form a valid message."""


@dataclass(eq=False)
class ScoreRequest:
    model_id: str
    t: int
    x: np.ndarray
    labels: Optional[np.ndarray] = None
    is_null: bool = False
    aux: Optional[np.ndarray] = None
    aux_kind: Optional[str] = None
    version: int = PROTOCOL_VERSION


@dataclass(eq=False)
class ScoreResponse:
    status: Status
    eps: Optional[np.ndarray] = None
    message: str = ""
    version: int = PROTOCOL_VERSION


def frame(body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + body


def _dims(arr: np.ndarray) -> bytes:
    if arr.ndim > 255:
        raise ProtocolError("too many dimensions")
    return struct.pack(">B", arr.ndim) + b"".join(struct.pack(">I", int(d)) for d in arr.shape)


def encode_request(req: ScoreRequest) -> bytes:
    mid = req.model_id.encode("utf-8")
    if len(mid) > 255:
        raise ProtocolError("model id longer than 255 bytes")
    if req.is_null and req.labels is not None:
        raise ProtocolError("a null condition cannot carry labels")
    x = np.ascontiguousarray(req.x, dtype="<f4")
    flags = (FLAG_NULL if req.is_null else 0) | (FLAG_AUX if req.aux is not None else 0)
    labels = np.zeros(0, dtype=np.int64) if req.labels is None else np.atleast_1d(np.asarray(req.labels))
    parts = [REQUEST_MAGIC, struct.pack(">I", req.version), struct.pack(">B", len(mid)), mid,
             struct.pack(">I", int(req.t)), struct.pack(">B", flags), struct.pack(">I", labels.size),
             labels.astype(">i4").tobytes(), _dims(x)]
    aux = None
    if req.aux is not None:
        if req.aux_kind not in AUX_CODES:
            raise ProtocolError(f"unknown aux kind {req.aux_kind!r}")
        aux = np.ascontiguousarray(req.aux, dtype="<f4")
        parts += [struct.pack(">B", AUX_CODES[req.aux_kind]), _dims(aux)]
    parts.append(x.tobytes())
    if aux is not None:
        parts.append(aux.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.buf = io.BytesIO(data)
        self.size = len(data)

    def take(self, n: int) -> bytes:
        b = self.buf.read(n)
        if len(b) != n:
            raise ProtocolError("message truncated")
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def dims(self) -> tuple:
        (nd,) = self.unpack(">B")
        return self.unpack(f">{nd}I") if nd else ()

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if n * 4 > self.size:
            raise ProtocolError("payload larger than message")
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)

    def done(self) -> None:
        if self.buf.read(1):
            raise ProtocolError("trailing bytes in message")


def decode_request(body: bytes) -> ScoreRequest:
    r = _Reader(body)
    if r.take(4) != REQUEST_MAGIC:
        raise ProtocolError("bad request magic")
    (version,) = r.unpack(">I")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    (mlen,) = r.unpack(">B")
    try:
        model_id = r.take(mlen).decode("utf-8")
    except UnicodeDecodeError:
        raise ProtocolError("model id is not UTF-8") from None
    (t,) = r.unpack(">I")
    (flags,) = r.unpack(">B")
    if flags & ~(FLAG_NULL | FLAG_AUX):
        raise ProtocolError("unknown flag bits")
    (nlab,) = r.unpack(">I")
    if nlab * 4 > r.size:
        raise ProtocolError("label count larger than message")
    labels = np.frombuffer(r.take(4 * nlab), dtype=">i4").astype(np.int64) if nlab else None
    is_null = bool(flags & FLAG_NULL)
    if is_null and labels is not None:
        raise ProtocolError("null condition with labels")
    shape = r.dims()
    aux_kind, aux_shape = None, None
    if flags & FLAG_AUX:
        (code,) = r.unpack(">B")
        if code not in AUX_KINDS:
            raise ProtocolError(f"unknown aux kind {code}")
        aux_kind = AUX_KINDS[code]
        aux_shape = r.dims()
    x = r.floats(shape)
    aux = r.floats(aux_shape) if aux_shape is not None else None
    r.done()
    return ScoreRequest(model_id, t, x, labels, is_null, aux, aux_kind, version)


def encode_response(resp: ScoreResponse) -> bytes:
    head = RESPONSE_MAGIC + struct.pack(">IB", resp.version, int(resp.status))
    if resp.status == Status.OK:
        eps = np.ascontiguousarray(resp.eps, dtype="<f4")
        return head + _dims(eps) + eps.tobytes()
    msg = resp.message.encode("utf-8")[:65535]
    return head + struct.pack(">H", len(msg)) + msg


def decode_response(body: bytes) -> ScoreResponse:
    r = _Reader(body)
    if r.take(4) != RESPONSE_MAGIC:
        raise ProtocolError("bad response magic")
    version, code = r.unpack(">IB")
    try:
        status = Status(code)
    except ValueError:
        raise ProtocolError(f"unknown status {code}") from None
    if status == Status.OK:
        eps = r.floats(r.dims())
        r.done()
        return ScoreResponse(status, eps, "", version)
    (n,) = r.unpack(">H")
    msg = r.take(n).decode("utf-8", errors="replace")
    r.done()
    return ScoreResponse(status, None, msg, version)
