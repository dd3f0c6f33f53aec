"""Small conditional denoisers: a time-embedded residual MLP and a residual conv stack.

The conv stack folds frames into channels, runs its residual blocks at half resolution
(stride-2 conv down, nearest upsampling back) and adds a full-resolution skip.

Initialization: every Linear/Conv weight and bias is drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
embedding tables from N(0, 1), all from a torch generator seeded with the checkpoint seed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .conditioning import CONDITION_MODES

PRECONDITIONING = ("none", "sigma", "v")


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Fully determines the network and its parameter count.

    ``input_shape`` is ``(D,)`` for flat data (MLP) or ``(H, height, width, channels)`` for video
    (conv stack, frames folded into channels). ``precondition="sigma"`` makes the network output
    ``eps = sigma_bar * f(x)``, i.e. ``f`` regresses the negative score; it suits smooth
    low-dimensional targets. ``precondition="v"`` outputs ``eps = sigma_bar * x + sqrt(1 - sigma_bar^2) * f(x)``
    (``f`` regresses the "velocity"), which is exact to leading order at high noise and keeps the
    reverse chain from drifting off the data manifold. With ``energy=True`` the network defines a scalar energy and the
    epsilon prediction is its input gradient.
    """

    input_shape: tuple
    width: int = 64
    blocks: int = 2
    temb_dim: int = 16
    vocab_size: int = 1
    cond_mode: str = "none"
    energy: bool = False
    precondition: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) not in (1, 4) or any(s < 1 for s in self.input_shape):
            raise ValueError("input_shape must be (D,) or (H, height, width, channels)")
        if self.width < 1 or self.blocks < 0:
            raise ValueError("width must be positive and blocks non-negative")
        if self.temb_dim < 2 or self.temb_dim % 2:
            raise ValueError("temb_dim must be an even integer >= 2")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.cond_mode not in CONDITION_MODES:
            raise ValueError(f"cond_mode must be one of {CONDITION_MODES}")
        if self.is_flat and self.cond_mode != "none":
            raise ValueError("frame conditioning needs a video input shape")
        if self.precondition not in PRECONDITIONING:
            raise ValueError(f"precondition must be one of {PRECONDITIONING}")

    @property
    def is_flat(self) -> bool:
        return len(self.input_shape) == 1

    @property
    def image_channels(self) -> int:
        H, _, _, C = self.input_shape
        return H * C

    @property
    def in_channels(self) -> int:
        """Channels entering the first conv (noisy video plus any concatenated condition)."""
        return self.image_channels * (1 if self.cond_mode == "none" else 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureDescriptor":
        return cls(**d)


def param_count(desc: ArchitectureDescriptor) -> int:
    """Closed-form parameter count."""
    W, E, B = desc.width, desc.temb_dim, desc.blocks
    emb = (E * W + W) + (desc.vocab_size + 1) * W
    if desc.is_flat:
        D = desc.input_shape[0]
        return (D * W + W) + emb + B * 2 * (W * W + W) + (W * D + D)
    cin, cout = desc.in_channels, desc.image_channels
    conv = W * W * 9 + W
    # input conv, stride-2 down conv, residual blocks, up conv, output conv
    return (cin * W * 9 + W) + emb + conv + B * 2 * conv + conv + (W * cout * 9 + cout)


def time_features(sigma_bar: torch.Tensor, dim: int, kind: str = "sigma") -> torch.Tensor:
    """Sinusoidal noise-level features.

    ``kind="sigma"`` uses the noise std ``sigma_bar`` in (0, 1): the features saturate smoothly as
    the noise vanishes, which suits the sigma-preconditioned output. ``kind="logsnr"`` uses the
    log-SNR recovered from ``sigma_bar`` (scaled by 1/20), which keeps low noise levels apart; a
    plain epsilon-predictor needs that to apply its ~1/sigma gain.
    """
    k = torch.arange(1, dim // 2 + 1, dtype=sigma_bar.dtype, device=sigma_bar.device)
    if kind == "sigma":
        u = sigma_bar * 2.0
    else:
        s2 = sigma_bar * sigma_bar
        lam = torch.log(torch.clamp(1.0 - s2, min=1e-12)) - torch.log(torch.clamp(s2, min=1e-30))
        u = torch.clamp(lam / 20.0, -1.5, 1.5)
    ang = 0.5 * math.pi * u[:, None] * k[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class Denoiser(nn.Module):
    def __init__(self, desc: ArchitectureDescriptor):
        super().__init__()
        self.desc = desc
        W = desc.width
        self.temb = nn.Linear(desc.temb_dim, W)
        # index vocab_size is the learned null ("unconditional") embedding
        self.label_emb = nn.Embedding(desc.vocab_size + 1, W)
        if desc.is_flat:
            D = desc.input_shape[0]
            self.inp = nn.Linear(D, W)
            self.block_a = nn.ModuleList(nn.Linear(W, W) for _ in range(desc.blocks))
            self.block_b = nn.ModuleList(nn.Linear(W, W) for _ in range(desc.blocks))
            self.out = nn.Linear(W, D)
        else:
            self.inp = nn.Conv2d(desc.in_channels, W, 3, padding=1)
            self.down = nn.Conv2d(W, W, 3, stride=2, padding=1)
            self.block_a = nn.ModuleList(
                nn.Conv2d(W, W, 3, padding=_dil(b), dilation=_dil(b)) for b in range(desc.blocks))
            self.block_b = nn.ModuleList(nn.Conv2d(W, W, 3, padding=1) for _ in range(desc.blocks))
            self.up = nn.Conv2d(W, W, 3, padding=1)
            self.out = nn.Conv2d(W, desc.image_channels, 3, padding=1)

    @property
    def null_index(self) -> int:
        return self.desc.vocab_size

    def init_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("label_emb"):
                    p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype))
                    continue
                layer = self.get_submodule(name.rsplit(".", 1)[0])
                fan_in = layer.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_((torch.rand(p.shape, generator=g, dtype=p.dtype) * 2 - 1) * bound)

    def _features(self, x, sigma_bar, labels, aux):
        """Network body; returns an output of the same shape as ``x``."""
        kind = "sigma" if self.desc.precondition == "sigma" else "logsnr"
        emb = self.temb(time_features(sigma_bar, self.desc.temb_dim, kind)) + self.label_emb(labels)
        if self.desc.is_flat:
            h = self.inp(x) + emb
            for a, b in zip(self.block_a, self.block_b):
                h = h + b(F.silu(a(F.silu(h)) + emb))
            return self.out(F.silu(h))
        B = x.shape[0]
        H, Hh, Ww, C = self.desc.input_shape
        img = x.permute(0, 1, 4, 2, 3).reshape(B, H * C, Hh, Ww)
        if self.desc.cond_mode != "none":
            if aux is None:
                raise ValueError(f"model expects a {self.desc.cond_mode} condition")
            aux_img = aux.permute(0, 1, 4, 2, 3).reshape(B, H * C, Hh, Ww)
            img = torch.cat([img, aux_img], dim=1)
        skip = self.inp(img)
        h = self.down(F.silu(skip))
        e = emb[:, :, None, None]
        for a, b in zip(self.block_a, self.block_b):
            h = h + b(F.silu(a(F.silu(h)) + e))
        h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
        h = skip + self.up(F.silu(h))
        out = self.out(F.silu(h))
        return out.reshape(B, H, C, Hh, Ww).permute(0, 1, 3, 4, 2)

    def _scale(self, sigma_bar, x):
        if self.desc.precondition == "none":
            return None
        sb = sigma_bar.reshape((-1,) + (1,) * (x.dim() - 1))
        return sb if self.desc.precondition == "sigma" else torch.sqrt(torch.clamp(1.0 - sb * sb, min=0.0))

    def _skip(self, sigma_bar, x):
        """Weight of the identity term (``v`` preconditioning only)."""
        return sigma_bar.reshape((-1,) + (1,) * (x.dim() - 1)) if self.desc.precondition == "v" else None

    def energy(self, x, sigma_bar, labels, aux=None):
        """Per-sample scalar energy ``c * 0.5 * ||x - g(x)||^2`` (energy-parameterized models).

        With ``v`` preconditioning the identity term ``0.5 * sigma_bar * ||x||^2`` is added.
        """
        g = self._features(x, sigma_bar, labels, aux)
        e = 0.5 * ((x - g) ** 2).reshape(x.shape[0], -1).sum(dim=1)
        scale = self._scale(sigma_bar, x)
        if scale is not None:
            e = e * scale.reshape(-1)
        skip = self._skip(sigma_bar, x)
        if skip is not None:
            e = e + 0.5 * skip.reshape(-1) * (x * x).reshape(x.shape[0], -1).sum(dim=1)
        return e

    def forward(self, x, sigma_bar, labels, aux=None, create_graph: bool = False):
        if self.desc.energy:
            with torch.enable_grad():
                xg = x if x.requires_grad else x.detach().requires_grad_(True)
                e = self.energy(xg, sigma_bar, labels, aux)
                (grad,) = torch.autograd.grad(e.sum(), xg, create_graph=create_graph)
            return grad
        out = self._features(x, sigma_bar, labels, aux)
        scale = self._scale(sigma_bar, x)
        if scale is not None:
            out = out * scale
        skip = self._skip(sigma_bar, x)
        return out if skip is None else out + skip * x


def _dil(b: int) -> int:
    return 2 ** (b % 3)
