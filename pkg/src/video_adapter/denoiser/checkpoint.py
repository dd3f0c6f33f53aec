"""Denoiser checkpoints and their on-disk format.

File layout::

    magic "VADP" | format version u32 LE | header length u32 LE | header (UTF-8 JSON)
    | parameters as little-endian float32, concatenated in ``header["layout"]`` order

The layout lists ``[name, shape]`` for each tensor in the module's registration order.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..core_math import NoiseSchedule, NoisySample, make_schedule
from .arch import ArchitectureDescriptor, Denoiser, param_count
from .conditioning import ConditionSpec

MAGIC = b"VADP"
FORMAT_VERSION = 1


@dataclass(eq=False)
class DenoiserCheckpoint:
    descriptor: ArchitectureDescriptor
    params: np.ndarray
    schedule: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float32).reshape(-1)
        expected = param_count(self.descriptor)
        if self.params.size != expected:
            raise ValueError(f"parameter blob has {self.params.size} entries, descriptor needs {expected}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("checkpoint parameters must be finite")
        self.params.setflags(write=False)
        self._lock = threading.Lock()
        self._modules: dict = {}
        self._sched: NoiseSchedule | None = None

    @property
    def num_params(self) -> int:
        return int(self.params.size)

    @property
    def sched(self) -> NoiseSchedule:
        if self._sched is None:
            s = self.schedule
            self._sched = make_schedule(s["T"], s["logsnr_min"], s["logsnr_max"])
        return self._sched

    def module(self, dtype=torch.float32) -> Denoiser:
        """Frozen torch module holding this checkpoint's parameters (built once per dtype)."""
        with self._lock:
            mod = self._modules.get(dtype)
            if mod is None:
                mod = build_module(self.descriptor, self.params, dtype)
                mod.eval()
                for p in mod.parameters():
                    p.requires_grad_(False)
                self._modules[dtype] = mod
            return mod

    def digest(self) -> str:
        return hashlib.sha256(self.params.tobytes()).hexdigest()


def build_module(desc: ArchitectureDescriptor, params: np.ndarray, dtype=torch.float32) -> Denoiser:
    mod = Denoiser(desc).to(dtype)
    vec = torch.from_numpy(np.array(params, dtype=np.float32)).to(dtype)
    torch.nn.utils.vector_to_parameters(vec, mod.parameters())
    return mod


def module_params(mod: Denoiser) -> np.ndarray:
    return torch.nn.utils.parameters_to_vector(mod.parameters()).detach().to(torch.float32).numpy().copy()


def init_denoiser(desc: ArchitectureDescriptor, seed: int, sched: NoiseSchedule) -> DenoiserCheckpoint:
    mod = Denoiser(desc)
    mod.init_parameters(seed)
    return DenoiserCheckpoint(desc, module_params(mod), sched.summary(),
                              {"init_seed": int(seed), "train_steps": 0})


def _torch_inputs(ckpt: DenoiserCheckpoint, sample: NoisySample, cond: ConditionSpec, dtype):
    desc = ckpt.descriptor
    x = np.asarray(sample.x)
    if x.shape[1:] != desc.input_shape:
        raise ValueError(f"sample shape {x.shape[1:]} does not match model input {desc.input_shape}")
    t = ckpt.sched.check_step(sample.t)
    B = x.shape[0]
    labels = cond.labels(B) if cond is not None else None
    if labels is None:
        labels = np.full(B, desc.vocab_size, dtype=np.int64)
    elif np.any(labels < 0) or np.any(labels >= desc.vocab_size):
        raise ValueError("label id outside the model vocabulary")
    aux = None if cond is None else cond.aux
    if desc.cond_mode == "first_frame":
        if cond is None or cond.first_frame is None:
            raise ValueError("model requires a first_frame condition")
        ff = np.asarray(cond.first_frame)
        if ff.shape != (B,) + desc.input_shape[1:]:
            raise ValueError(f"first_frame has shape {ff.shape}")
        aux = np.repeat(ff[:, None], desc.input_shape[0], axis=1)
    elif desc.cond_mode == "edge":
        if cond is None or cond.edge_video is None:
            raise ValueError("model requires an edge_video condition")
        if np.shape(cond.edge_video) != x.shape:
            raise ValueError("edge_video must match the sample shape")
    elif aux is not None:
        raise ValueError("model takes no frame conditioning")
    tx = torch.from_numpy(np.ascontiguousarray(x)).to(dtype)
    sb = torch.full((B,), float(ckpt.sched.sigma_bar[t]), dtype=dtype)
    tl = torch.from_numpy(np.ascontiguousarray(labels))
    ta = None if aux is None else torch.from_numpy(np.ascontiguousarray(aux)).to(dtype)
    return tx, sb, tl, ta


def predict_eps(ckpt: DenoiserCheckpoint, sample: NoisySample, cond: ConditionSpec | None = None,
                dtype=torch.float32) -> np.ndarray:
    """Epsilon prediction for a batch ``sample.x`` of shape ``(B, *input_shape)``."""
    mod = ckpt.module(dtype)
    tx, sb, tl, ta = _torch_inputs(ckpt, sample, cond, dtype)
    if ckpt.descriptor.energy:
        out = mod(tx, sb, tl, ta)
    else:
        with torch.no_grad():
            out = mod(tx, sb, tl, ta)
    np_dtype = np.float64 if dtype == torch.float64 else np.float32
    return out.detach().numpy().astype(np_dtype, copy=False)


def energy_value(ckpt: DenoiserCheckpoint, sample: NoisySample, cond: ConditionSpec | None = None,
                 dtype=torch.float64) -> np.ndarray:
    if not ckpt.descriptor.energy:
        raise ValueError("checkpoint is not energy-parameterized")
    mod = ckpt.module(dtype)
    tx, sb, tl, ta = _torch_inputs(ckpt, sample, cond, dtype)
    with torch.no_grad():
        return mod.energy(tx, sb, tl, ta).numpy()


def save_checkpoint(ckpt: DenoiserCheckpoint, path) -> str:
    mod = Denoiser(ckpt.descriptor)
    layout = [[name, list(p.shape)] for name, p in mod.named_parameters()]
    header = {
        "descriptor": ckpt.descriptor.to_dict(),
        "schedule": ckpt.schedule,
        "metadata": ckpt.metadata,
        "layout": layout,
        "param_count": ckpt.num_params,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb + ckpt.params.astype("<f4").tobytes()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> DenoiserCheckpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    desc = ArchitectureDescriptor.from_dict(header["descriptor"])
    blob = data[12 + hlen:]
    if len(blob) != 4 * param_count(desc):
        raise ValueError(f"{path}: parameter blob length does not match descriptor")
    params = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    return DenoiserCheckpoint(desc, params, header["schedule"], header.get("metadata", {}))
