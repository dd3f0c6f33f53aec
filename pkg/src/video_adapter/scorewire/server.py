"""Threaded TCP server exposing frozen checkpoints' epsilon predictions."""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from typing import Mapping

import numpy as np

from ..core_math import NoisySample
from ..denoiser.checkpoint import DenoiserCheckpoint, predict_eps
from ..denoiser.conditioning import ConditionSpec
from .protocol import (MAX_FRAME, ProtocolError, ScoreResponse, Status, decode_request, encode_response,
                       frame)

log = logging.getLogger(__name__)

POLL_INTERVAL = 0.25


class _Stopping(Exception):
    pass


def evaluate(checkpoints: Mapping[str, DenoiserCheckpoint], body: bytes) -> ScoreResponse:
    """Decode one request body and compute the response; never raises."""
    try:
        req = decode_request(body)
    except ProtocolError as exc:
        return ScoreResponse(Status.BAD_SHAPE, message=f"malformed request: {exc}")
    ckpt = checkpoints.get(req.model_id)
    if ckpt is None:
        return ScoreResponse(Status.UNKNOWN_MODEL, message=f"unknown model {req.model_id!r}")
    desc = ckpt.descriptor
    if not 1 <= req.t <= ckpt.sched.num_steps:
        return ScoreResponse(Status.BAD_STEP, message=f"step {req.t} outside 1..{ckpt.sched.num_steps}")
    x = req.x
    if x.ndim != len(desc.input_shape) + 1 or tuple(x.shape[1:]) != desc.input_shape or x.shape[0] < 1:
        return ScoreResponse(Status.BAD_SHAPE, message=f"expected (B, {desc.input_shape}), got {x.shape}")
    B = x.shape[0]
    labels = req.labels
    if labels is not None:
        if labels.size not in (1, B):
            return ScoreResponse(Status.BAD_SHAPE, message="label count must be 1 or the batch size")
        if np.any(labels < 0) or np.any(labels >= desc.vocab_size):
            return ScoreResponse(Status.BAD_SHAPE, message="label outside the model vocabulary")
        labels = np.broadcast_to(labels, (B,)).copy()
    want = {"none": None, "first_frame": "first_frame", "edge": "edge"}[desc.cond_mode]
    if req.aux_kind != want:
        return ScoreResponse(Status.BAD_SHAPE, message=f"model expects aux condition {want!r}")
    first_frame = edge = None
    if want == "first_frame":
        if req.aux.shape != (B,) + desc.input_shape[1:]:
            return ScoreResponse(Status.BAD_SHAPE, message="first_frame shape mismatch")
        first_frame = req.aux
    elif want == "edge":
        if req.aux.shape != x.shape:
            return ScoreResponse(Status.BAD_SHAPE, message="edge video shape mismatch")
        edge = req.aux
    try:
        cond = ConditionSpec(None if req.is_null else labels, first_frame, edge, req.is_null)
        eps = predict_eps(ckpt, NoisySample(x, req.t), cond)
    except Exception as exc:  # model errors must not kill the connection
        log.exception("internal error evaluating request")
        return ScoreResponse(Status.INTERNAL, message=f"{type(exc).__name__}: {exc}")
    return ScoreResponse(Status.OK, eps=eps)


class _Handler(socketserver.BaseRequestHandler):
    def _recv_exact(self, n: int, allow_eof: bool) -> bytes | None:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.request.recv(min(n - len(buf), 1 << 20))
            except socket.timeout:
                # only abandon a connection between frames; a partial frame is still drained
                if self.server.stopping.is_set() and not buf:
                    raise _Stopping()
                continue
            if not chunk:
                if allow_eof and not buf:
                    return None
                raise ConnectionError("peer closed mid-frame")
            buf += chunk
        return bytes(buf)

    def handle(self):
        self.request.settimeout(POLL_INTERVAL)
        try:
            while True:
                head = self._recv_exact(4, allow_eof=True)
                if head is None:
                    return
                (length,) = struct.unpack(">I", head)
                if length > MAX_FRAME:
                    # cannot resynchronize: report and drop the connection
                    self._send(ScoreResponse(Status.BAD_SHAPE, message="frame too large"))
                    return
                body = self._recv_exact(length, allow_eof=False)
                self._send(evaluate(self.server.checkpoints, body))
        except (_Stopping, ConnectionError, OSError):
            return

    def _send(self, resp: ScoreResponse):
        self.request.sendall(frame(encode_response(resp)))


class ScoreServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    """Serves read-only checkpoints; each connection gets its own thread."""

    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(self, checkpoints: Mapping[str, DenoiserCheckpoint], address=("127.0.0.1", 0)):
        self.checkpoints = dict(checkpoints)
        for ckpt in self.checkpoints.values():
            ckpt.module()  # build frozen modules before accepting traffic
        self.stopping = threading.Event()
        super().__init__(address, _Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple:
        return self.server_address[:2]

    def start(self) -> "ScoreServer":
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": POLL_INTERVAL},
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        """Stop accepting connections, let in-flight requests finish, then close."""
        self.stopping.set()
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start() if self._thread is None else self

    def __exit__(self, *exc):
        self.stop()


def serve(checkpoints: Mapping[str, DenoiserCheckpoint], address=("127.0.0.1", 0)) -> ScoreServer:
    """Bind and start serving in a background thread; returns the running server handle."""
    return ScoreServer(checkpoints, address).start()
