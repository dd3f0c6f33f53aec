"""Conditioning inputs: label ("text"), replicated first frame, and Sobel x-edge videos."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])

CONDITION_MODES = ("none", "first_frame", "edge")


@dataclass(frozen=True, eq=False)
class ConditionSpec:
    """Conditioning for a batch of samples.

    ``label_id`` is an int or an int array with one entry per sample. ``is_null`` selects the
    unconditional branch (the learned null embedding) and excludes ``label_id``.
    ``first_frame`` has shape ``(B, height, width, channels)``; ``edge_video`` has the full
    video shape ``(B, H, height, width, channels)``.
    """

    label_id: Optional[object] = None
    first_frame: Optional[np.ndarray] = None
    edge_video: Optional[np.ndarray] = None
    is_null: bool = False

    def __post_init__(self):
        if self.is_null and self.label_id is not None:
            raise ValueError("a null condition cannot carry a label")
        if self.first_frame is not None and self.edge_video is not None:
            raise ValueError("at most one of first_frame / edge_video may be given")

    @classmethod
    def null(cls, first_frame=None, edge_video=None) -> "ConditionSpec":
        return cls(None, first_frame, edge_video, True)

    def as_null(self) -> "ConditionSpec":
        """Same auxiliary tensors, label dropped."""
        return ConditionSpec(None, self.first_frame, self.edge_video, True)

    @property
    def aux(self) -> Optional[np.ndarray]:
        return self.first_frame if self.first_frame is not None else self.edge_video

    def labels(self, batch: int) -> Optional[np.ndarray]:
        if self.is_null or self.label_id is None:
            return None
        lab = np.asarray(self.label_id, dtype=np.int64)
        if lab.ndim == 0:
            lab = np.full(batch, int(lab), dtype=np.int64)
        if lab.shape != (batch,):
            raise ValueError(f"label_id has shape {lab.shape}, expected ({batch},)")
        return lab

    def take(self, idx) -> "ConditionSpec":
        """Restrict to a subset of the batch."""
        lab = self.label_id
        if lab is not None and np.ndim(lab) > 0:
            lab = np.asarray(lab)[idx]
        ff = None if self.first_frame is None else self.first_frame[idx]
        ev = None if self.edge_video is None else self.edge_video[idx]
        return ConditionSpec(lab, ff, ev, self.is_null)


def make_first_frame_condition(frame: np.ndarray, H: int) -> np.ndarray:
    """Replicate one frame (``(height, width, channels)`` or batched) across ``H`` frame slots.

    The result is concatenated channel-wise with the noisy video when the model is called,
    which doubles the effective input channel count.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    frame = np.asarray(frame)
    if frame.ndim == 3:
        return np.repeat(frame[None], H, axis=0)
    if frame.ndim == 4:
        return np.repeat(frame[:, None], H, axis=1)
    raise ValueError(f"expected a frame of rank 3 or 4, got shape {frame.shape}")


def sobel_edges(video: np.ndarray, raw: bool = False) -> np.ndarray:
    """Horizontal Sobel response per frame and channel, replicate-padded.

    Input layout is ``(..., height, width, channels)``. Unless ``raw`` is set each frame is
    divided by its maximum absolute response so values land in ``[-1, 1]`` (flat frames stay 0).
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim < 3:
        raise ValueError("expected (..., height, width, channels)")
    if video.shape[-2] < 3:
        raise ValueError("sobel_edges needs width >= 3")
    pad = [(0, 0)] * (video.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    p = np.pad(video, pad, mode="edge")
    h, w = video.shape[-3], video.shape[-2]
    out = np.zeros_like(video)
    for di in range(3):
        for dj in range(3):
            k = SOBEL_X[di, dj]
            if k != 0.0:
                out += k * p[..., di:di + h, dj:dj + w, :]
    if raw:
        return out
    scale = np.max(np.abs(out), axis=(-3, -2, -1), keepdims=True)
    return np.where(scale > 0, out / np.where(scale > 0, scale, 1.0), 0.0).astype(np.float32)
