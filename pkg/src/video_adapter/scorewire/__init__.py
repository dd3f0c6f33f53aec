"""Serving frozen denoisers' epsilon predictions over a length-prefixed binary protocol."""

from .client import (BadShapeError, BadStepError, RemoteInternalError, RemoteScoreSource, RemoteStatusError,
                     ScoreClient, ScoreWireError, TransportError, UnknownModelError, remote_eps)
from .protocol import PROTOCOL_VERSION, ScoreRequest, ScoreResponse, Status
from .server import ScoreServer, serve

__all__ = [
    "BadShapeError", "BadStepError", "PROTOCOL_VERSION", "RemoteInternalError", "RemoteScoreSource",
    "RemoteStatusError", "ScoreClient", "ScoreRequest", "ScoreResponse", "ScoreServer", "ScoreWireError",
    "Status", "TransportError", "UnknownModelError", "remote_eps", "serve",
]
