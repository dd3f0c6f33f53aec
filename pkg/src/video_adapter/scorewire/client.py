"""Blocking client and the remote score source used by the composed sampler."""

from __future__ import annotations

import socket
import struct
import threading

import numpy as np

from ..core_math import NoisySample
from ..denoiser.conditioning import ConditionSpec
from .protocol import MAX_FRAME, ProtocolError, ScoreRequest, Status, decode_response, encode_request, frame

DEFAULT_TIMEOUT = 30.0


class ScoreWireError(RuntimeError):
    pass


class TransportError(ScoreWireError):
    pass


class RemoteStatusError(ScoreWireError):
    status = Status.INTERNAL


class UnknownModelError(RemoteStatusError):
    status = Status.UNKNOWN_MODEL


class BadShapeError(RemoteStatusError):
    status = Status.BAD_SHAPE


class BadStepError(RemoteStatusError):
    status = Status.BAD_STEP


class RemoteInternalError(RemoteStatusError):
    status = Status.INTERNAL


_ERRORS = {Status.UNKNOWN_MODEL: UnknownModelError, Status.BAD_SHAPE: BadShapeError,
           Status.BAD_STEP: BadStepError, Status.INTERNAL: RemoteInternalError}


class ScoreClient:
    """One connection, one request in flight at a time (calls are serialized by a lock)."""

    def __init__(self, host: str, port: int, timeout: float = DEFAULT_TIMEOUT):
        self.address = (host, int(port))
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def connect(self) -> "ScoreClient":
        try:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {self.address}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self):
        return self.connect() if self._sock is None else self

    def __exit__(self, *exc):
        self.close()

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self._sock.recv(min(n - len(buf), 1 << 20))
            if not chunk:
                raise TransportError("server closed the connection")
            buf += chunk
        return bytes(buf)

    def roundtrip(self, body: bytes) -> bytes:
        """Send one request body and return the raw response body."""
        with self._lock:
            if self._sock is None:
                self.connect()
            try:
                self._sock.sendall(frame(body))
                (length,) = struct.unpack(">I", self._recv_exact(4))
                if length > MAX_FRAME:
                    raise TransportError("response frame too large")
                return self._recv_exact(length)
            except socket.timeout as exc:
                self.close()
                raise TransportError(f"timed out after {self.timeout} s") from exc
            except OSError as exc:
                self.close()
                raise TransportError(str(exc)) from exc

    def request(self, req: ScoreRequest) -> np.ndarray:
        try:
            resp = decode_response(self.roundtrip(encode_request(req)))
        except ProtocolError as exc:
            raise TransportError(f"malformed response: {exc}") from exc
        if resp.status != Status.OK:
            raise _ERRORS[resp.status](resp.message)
        if resp.eps.shape != req.x.shape:
            raise TransportError(f"response shape {resp.eps.shape} does not match request {req.x.shape}")
        return resp.eps


def build_request(model_id: str, sample: NoisySample, cond: ConditionSpec | None) -> ScoreRequest:
    x = np.asarray(sample.x, dtype=np.float32)
    if cond is None:
        return ScoreRequest(model_id, sample.t, x, None, True)
    labels = cond.labels(x.shape[0])
    aux, kind = None, None
    if cond.first_frame is not None:
        aux, kind = cond.first_frame, "first_frame"
    elif cond.edge_video is not None:
        aux, kind = cond.edge_video, "edge"
    return ScoreRequest(model_id, sample.t, x, labels, labels is None, aux, kind)


def remote_eps(client: ScoreClient, model_id: str, sample: NoisySample, cond: ConditionSpec | None) -> np.ndarray:
    return client.request(build_request(model_id, sample, cond))


class RemoteScoreSource:
    """Score source backed by a model served over the wire."""

    def __init__(self, client: ScoreClient, model_id: str, has_uncond: bool = True):
        self.client = client
        self.model_id = model_id
        self.has_uncond = has_uncond

    def eps(self, sample: NoisySample, cond: ConditionSpec) -> np.ndarray:
        return remote_eps(self.client, self.model_id, sample, cond)
