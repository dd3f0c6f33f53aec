"""Denoising-regression training with condition dropout."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..core_math import KeyedRng, NoiseSchedule
from .arch import Denoiser
from .checkpoint import DenoiserCheckpoint, build_module, module_params

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    cond_dropout: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    grad_clip: float = 1.0
    warmup_steps: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must be in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.warmup_steps < 0 or not self.grad_clip > 0:
            raise ValueError("warmup_steps must be >= 0 and grad_clip positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class TrainingArrays:
    """Clean samples with optional labels and frame conditions, all indexed by record."""

    x: np.ndarray
    labels: np.ndarray | None = None
    first_frames: np.ndarray | None = None
    edges: np.ndarray | None = None
    dataset_id: str = ""

    def __len__(self):
        return int(self.x.shape[0])


def as_training_arrays(data) -> TrainingArrays:
    if isinstance(data, TrainingArrays):
        return data
    if isinstance(data, np.ndarray):
        return TrainingArrays(data)
    # DatasetFile duck-typing keeps this module free of the worlds import
    return TrainingArrays(data.videos, data.labels, data.first_frames, data.edges,
                          str(data.spec.get("seed", "")))


def dropout_mask(g: np.random.Generator, n: int, p: float) -> np.ndarray:
    """``True`` where the label is replaced by the null condition."""
    return g.random(n) < p


def draw_batch(data: TrainingArrays, sched: NoiseSchedule, cfg: TrainConfig, step: int, null_index: int,
               cond_mode: str):
    """Minibatch draws for one step, all from the stream keyed by ``(seed, "train", step)``."""
    g = KeyedRng(cfg.seed).generator("train", step)
    n = len(data)
    idx = g.integers(0, n, size=cfg.batch_size)
    t = g.integers(1, sched.num_steps + 1, size=cfg.batch_size)
    eps = g.standard_normal((cfg.batch_size,) + data.x.shape[1:])
    drop = dropout_mask(g, cfg.batch_size, cfg.cond_dropout)
    if data.labels is None:
        labels = np.full(cfg.batch_size, null_index, dtype=np.int64)
    else:
        labels = np.where(drop, null_index, data.labels[idx]).astype(np.int64)
    aux = None
    if cond_mode == "first_frame":
        ff = data.first_frames if data.first_frames is not None else data.x[:, 0]
        aux = np.repeat(ff[idx][:, None], data.x.shape[1], axis=1)
    elif cond_mode == "edge":
        if data.edges is None:
            raise ValueError("edge-conditioned model needs edge videos in the dataset")
        aux = data.edges[idx]
    return data.x[idx], t, eps, labels, aux


def batch_loss(mod: Denoiser, x0, t, eps, labels, aux, sched: NoiseSchedule, dtype=torch.float32):
    """Mean over the batch of ``||eps - eps_hat(x_t)||^2`` (summed over coordinates)."""
    shape = (-1,) + (1,) * (x0.ndim - 1)
    sa = torch.from_numpy(np.sqrt(sched.alpha_bar[t])).to(dtype).reshape(shape)
    sb_flat = torch.from_numpy(sched.sigma_bar[t]).to(dtype)
    sb = sb_flat.reshape(shape)
    tx0 = torch.from_numpy(np.ascontiguousarray(x0)).to(dtype)
    teps = torch.from_numpy(np.ascontiguousarray(eps)).to(dtype)
    xt = sa * tx0 + sb * teps
    ta = None if aux is None else torch.from_numpy(np.ascontiguousarray(aux)).to(dtype)
    if mod.desc.energy:
        xt = xt.detach().requires_grad_(True)
    pred = mod(xt, sb_flat, torch.from_numpy(labels), ta, create_graph=True)
    return ((teps - pred) ** 2).reshape(x0.shape[0], -1).sum(dim=1).mean()


def train_denoiser(ckpt: DenoiserCheckpoint, data, cfg: TrainConfig, sched: NoiseSchedule,
                   progress_every: int = 0):
    """Minibatch training on the denoising loss. Returns ``(new_checkpoint, loss_curve)``."""
    data = as_training_arrays(data)
    if len(data) == 0:
        raise ValueError("training data is empty")
    if sched.summary() != ckpt.schedule:
        raise ValueError("schedule does not match the checkpoint's schedule")
    desc = ckpt.descriptor
    if data.x.shape[1:] != desc.input_shape:
        raise ValueError(f"data shape {data.x.shape[1:]} does not match model input {desc.input_shape}")
    mod = build_module(desc, ckpt.params)
    mod.train()
    params = list(mod.parameters())
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr)
    else:
        opt = torch.optim.SGD(params, lr=cfg.lr)
    losses = np.zeros(cfg.steps)
    for step in range(cfg.steps):
        if cfg.warmup_steps:
            for group in opt.param_groups:
                group["lr"] = cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)
        x0, t, eps, labels, aux = draw_batch(data, sched, cfg, step, mod.null_index, desc.cond_mode)
        loss = batch_loss(mod, x0, t, eps, labels, aux, sched)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        losses[step] = value
        if progress_every and (step + 1) % progress_every == 0:
            log.info("step %d loss %.4f", step + 1, losses[max(0, step - progress_every + 1):step + 1].mean())
    meta = dict(ckpt.metadata)
    meta["train_steps"] = int(meta.get("train_steps", 0)) + cfg.steps
    meta.setdefault("runs", [])
    meta["runs"] = list(meta["runs"]) + [{"dataset_id": data.dataset_id, **cfg.to_dict()}]
    meta["cond_dropout"] = cfg.cond_dropout
    new = DenoiserCheckpoint(desc, module_params(mod), dict(ckpt.schedule), meta)
    return new, losses
