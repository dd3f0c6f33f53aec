"""Synthetic data: analytic Gaussian mixtures and toy moving-shape video corpora."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core_math import KeyedRng
from .denoiser.conditioning import sobel_edges

DYNAMICS = ("bounce", "drift", "static")

# Style vocabulary. Each style is a rendering choice; dynamics are shared across styles.
STYLES = {
    0: {"name": "plain", "shape": "square", "polarity": 1, "texture": "solid"},
    1: {"name": "diamond", "shape": "diamond", "polarity": 1, "texture": "solid"},
    2: {"name": "striped", "shape": "square", "polarity": 1, "texture": "stripes"},
    3: {"name": "inverted-cross", "shape": "cross", "polarity": -1, "texture": "solid"},
}
STYLE_VOCAB = len(STYLES)


# --------------------------------------------------------------------------- gaussian mixtures

@dataclass(frozen=True, eq=False)
class GMMSpec:
    """Diagonal-covariance Gaussian mixture."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64)
        if var.ndim == 0:
            var = np.full_like(means, float(var))
        elif var.ndim == 1 and means.shape[1] == 1 and var.shape[0] == means.shape[0]:
            var = var[:, None]
        var = np.broadcast_to(var, means.shape).copy()
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != means.shape[0]:
            raise ValueError("one weight per component required")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 (got {w.sum()!r})")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @classmethod
    def isotropic(cls, means, std: float = 1.0, weights=None) -> "GMMSpec":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k = means.shape[0]
        w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        return cls(means, np.full_like(means, std**2), w)


def gen_gmm_samples(spec: GMMSpec, n: int, seed: int, return_components: bool = False):
    """``n`` i.i.d. draws (float64), deterministic per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = KeyedRng(seed)
    comp = rng.generator("gmm", "component").choice(spec.n_components, size=n, p=spec.weights)
    z = rng.generator("gmm", "noise").standard_normal((n, spec.dim))
    x = spec.means[comp] + np.sqrt(spec.variances[comp]) * z
    return (x, comp) if return_components else x


# --------------------------------------------------------------------------- toy videos

@dataclass(frozen=True)
class ToyVideoSpec:
    """Generation parameters for a corpus of moving-shape clips.

    ``dynamics`` and ``styles`` list the families/styles drawn uniformly per clip (or according
    to ``style_weights``). The clip label is the index of its dynamics family in ``DYNAMICS``.
    """

    grid: int = 16
    frames: int = 8
    channels: int = 1
    dynamics: tuple = DYNAMICS
    styles: tuple = (0,)
    style_weights: Optional[tuple] = None
    shape_size: int = 5
    count: int = 256
    seed: int = 0
    with_first_frame: bool = False
    with_edges: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dynamics", tuple(self.dynamics))
        object.__setattr__(self, "styles", tuple(int(s) for s in self.styles))
        if self.style_weights is not None:
            object.__setattr__(self, "style_weights", tuple(float(w) for w in self.style_weights))
        self.validate()

    def validate(self) -> None:
        if self.grid < 8:
            raise ValueError("grid must be >= 8")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if not self.dynamics or any(d not in DYNAMICS for d in self.dynamics):
            raise ValueError(f"dynamics must be a non-empty subset of {DYNAMICS}")
        if not self.styles or any(s not in STYLES for s in self.styles):
            raise ValueError(f"style ids must lie in 0..{STYLE_VOCAB - 1}")
        if self.style_weights is not None:
            if len(self.style_weights) != len(self.styles) or any(w < 0 for w in self.style_weights) \
                    or sum(self.style_weights) <= 0:
                raise ValueError("style_weights must be non-negative, one per style")
        if not 3 <= self.shape_size <= self.grid - 2:
            raise ValueError("shape_size must be in [3, grid - 2]")
        if self.count < 1:
            raise ValueError("count must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dynamics"] = list(self.dynamics)
        d["styles"] = list(self.styles)
        d["style_weights"] = None if self.style_weights is None else list(self.style_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyVideoSpec":
        d = dict(d)
        for k in ("dynamics", "styles", "style_weights"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def shape_mask(kind: str, size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    i, j = np.mgrid[0:size, 0:size]
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "diamond":
        return (np.abs(i - c) + np.abs(j - c)) <= c
    if kind == "cross":
        half = size // 6
        return (np.abs(i - c) <= half) | (np.abs(j - c) <= half)
    if kind == "ring":
        r = np.hypot(i - c, j - c)
        return (r <= c + 0.25) & (r >= c - 1.25)
    raise ValueError(f"unknown shape kind {kind!r}")


def _trajectory(family: str, start: np.ndarray, vel: np.ndarray, frames: int, lo: int, hi: int):
    """Integer top-left positions; bounce reflects inside ``[lo, hi]``, drift wraps."""
    pos = np.empty((frames, 2), dtype=np.int64)
    p = start.copy()
    v = vel.copy() if family != "static" else np.zeros(2, dtype=np.int64)
    for f in range(frames):
        pos[f] = p
        nxt = p + v
        if family == "bounce":
            for d in range(2):
                if nxt[d] < lo:
                    nxt[d] = 2 * lo - nxt[d]
                    v[d] = -v[d]
                elif nxt[d] > hi:
                    nxt[d] = 2 * hi - nxt[d]
                    v[d] = -v[d]
        p = nxt
    return pos


def render_clip(style_id: int, family: str, start, vel, grid: int, frames: int, channels: int,
                shape_size: int) -> np.ndarray:
    style = STYLES[style_id]
    mask = shape_mask(style["shape"], shape_size)
    if style["texture"] == "stripes":
        fill = np.where(np.arange(shape_size) % 2 == 0, 1.0, 0.0)[None, :] * np.ones((shape_size, 1))
        fill = 2.0 * fill - 1.0
    else:
        fill = np.ones((shape_size, shape_size))
    pol = float(style["polarity"])
    pos = _trajectory(family, np.asarray(start, dtype=np.int64), np.asarray(vel, dtype=np.int64),
                      frames, 0, grid - shape_size)
    clip = np.full((frames, grid, grid), -pol, dtype=np.float32)
    rows = np.arange(shape_size)
    for f in range(frames):
        r = (pos[f, 0] + rows) % grid
        c = (pos[f, 1] + rows) % grid
        patch = clip[f][np.ix_(r, c)]
        patch[mask] = (pol * fill)[mask]
        clip[f][np.ix_(r, c)] = patch
    return np.repeat(clip[..., None], channels, axis=-1)


@dataclass(eq=False)
class DatasetFile:
    """A corpus of clips with labels, style ids and optional conditioning tensors."""

    videos: np.ndarray
    labels: np.ndarray
    styles: np.ndarray
    first_frames: Optional[np.ndarray] = None
    edges: Optional[np.ndarray] = None
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.videos = np.ascontiguousarray(self.videos, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.styles = np.asarray(self.styles, dtype=np.int64)
        n = self.videos.shape[0]
        if self.labels.shape != (n,) or self.styles.shape != (n,):
            raise ValueError("labels/styles must have one entry per record")
        if not np.all(np.isfinite(self.videos)) or np.abs(self.videos).max(initial=0.0) > 1.0:
            raise ValueError("video values must be finite and within [-1, 1]")

    def __len__(self) -> int:
        return int(self.videos.shape[0])

    @property
    def video_shape(self) -> tuple:
        return tuple(self.videos.shape[1:])

    def subset(self, idx) -> "DatasetFile":
        idx = np.asarray(idx, dtype=np.int64)
        return DatasetFile(self.videos[idx], self.labels[idx], self.styles[idx],
                           None if self.first_frames is None else self.first_frames[idx],
                           None if self.edges is None else self.edges[idx], dict(self.spec))

    def clip_hashes(self) -> list[str]:
        return [hashlib.sha256(v.tobytes()).hexdigest() for v in self.videos]


def _dedupe_key(clip: np.ndarray) -> bytes:
    return hashlib.sha256(clip.tobytes()).digest()


def gen_toy_videos(spec: ToyVideoSpec, exclude: Optional[set] = None) -> DatasetFile:
    """Render ``spec.count`` distinct clips. Clip ``i`` uses streams keyed by ``(seed, i, attempt)``.

    ``exclude`` holds clip digests that must not be produced (used to keep corpora disjoint).
    """
    spec.validate()
    rng = KeyedRng(spec.seed)
    seen = set() if exclude is None else set(exclude)
    G, S = spec.grid, spec.shape_size
    p_style = None
    if spec.style_weights is not None:
        p_style = np.asarray(spec.style_weights, dtype=np.float64)
        p_style = p_style / p_style.sum()
    videos, labels, styles = [], [], []
    for i in range(spec.count):
        for attempt in range(1000):
            g = rng.generator("clip", i, attempt)
            fam_idx = int(g.integers(len(spec.dynamics)))
            family = spec.dynamics[fam_idx]
            style = spec.styles[int(g.choice(len(spec.styles), p=p_style))]
            start = g.integers(0, G - S + 1, size=2)
            vel = g.integers(1, 3, size=2) * g.choice([-1, 1], size=2)
            clip = render_clip(style, family, start, vel, G, spec.frames, spec.channels, S)
            key = _dedupe_key(clip)
            if key not in seen:
                seen.add(key)
                break
        else:
            raise RuntimeError("could not render enough distinct clips; enlarge the grid or reduce count")
        videos.append(clip)
        labels.append(DYNAMICS.index(family))
        styles.append(style)
    videos = np.stack(videos)
    first = videos[:, 0].copy() if spec.with_first_frame else None
    edges = sobel_edges(videos) if spec.with_edges else None
    return DatasetFile(videos, np.array(labels), np.array(styles), first, edges, spec.to_dict())


def split_corpora(broad: ToyVideoSpec, adapt: ToyVideoSpec, test_fraction: float = 0.1):
    """Return ``(pretrain, adapt_train, adapt_test)``.

    The adaptation corpus is generated first and split 90/10; the broad corpus is then rendered
    with every adaptation clip excluded, so no clip appears in two splits.
    """
    if broad.seed == adapt.seed:
        raise ValueError("broad and adaptation corpora must use different seeds")
    adapt_set = gen_toy_videos(adapt)
    n = len(adapt_set)
    n_test = int(round(test_fraction * n))
    perm = KeyedRng(adapt.seed).generator("split").permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    exclude = {_dedupe_key(v) for v in adapt_set.videos}
    pretrain = gen_toy_videos(broad, exclude=exclude)
    return pretrain, adapt_set.subset(train_idx), adapt_set.subset(test_idx)


# --------------------------------------------------------------------------- dataset file io

DATASET_MAGIC = b"VADS"
DATASET_VERSION = 1


def save_dataset(ds: DatasetFile, path) -> str:
    """Write ``ds``; returns the sha256 of the file. Layout::

        magic "VADS" | version u32 LE | header length u32 LE | header JSON (utf-8)
        | videos f32 LE | first frames f32 LE (optional) | edge videos f32 LE (optional)
    """
    header = {
        "count": len(ds),
        "video_shape": list(ds.video_shape),
        "labels": ds.labels.tolist(),
        "styles": ds.styles.tolist(),
        "has_first_frame": ds.first_frames is not None,
        "has_edges": ds.edges is not None,
        "spec": ds.spec,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(hb)), hb,
             ds.videos.astype("<f4").tobytes()]
    if ds.first_frames is not None:
        parts.append(np.asarray(ds.first_frames, dtype="<f4").tobytes())
    if ds.edges is not None:
        parts.append(np.asarray(ds.edges, dtype="<f4").tobytes())
    data = b"".join(parts)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path) -> DatasetFile:
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    off = 12 + hlen
    n = header["count"]
    vshape = tuple(header["video_shape"])

    def take(shape):
        nonlocal off
        size = int(np.prod(shape)) * 4
        if off + size > len(data):
            raise ValueError(f"{path}: truncated payload")
        arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=off).reshape(shape)
        off += size
        return arr.astype(np.float32)

    videos = take((n,) + vshape)
    first = take((n,) + vshape[1:]) if header["has_first_frame"] else None
    edges = take((n,) + vshape) if header["has_edges"] else None
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after payload")
    return DatasetFile(videos, header["labels"], header["styles"], first, edges, header["spec"])


def parse_spec_text(text: str) -> dict[str, ToyVideoSpec]:
    """Parse a ``[section]`` / ``key = value`` toy-video spec file into named specs."""
    from .config import parse_sections

    out = {}
    for name, (entries, _) in parse_sections(text).items():
        kwargs = {}
        for key, (raw, lineno) in entries.items():
            kwargs[key] = _coerce_spec_value(key, raw, lineno)
        try:
            out[name] = ToyVideoSpec(**kwargs)
        except TypeError as exc:
            raise ValueError(f"section [{name}]: {exc}") from None
    return out


def _coerce_spec_value(key: str, raw: str, lineno: int):
    fields = ToyVideoSpec.__dataclass_fields__
    if key not in fields:
        raise ValueError(f"line {lineno}: unknown key {key!r}")
    try:
        if key == "dynamics":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if key == "styles":
            return tuple(int(s) for s in raw.split(",") if s.strip())
        if key == "style_weights":
            return tuple(float(s) for s in raw.split(",") if s.strip())
        if key in ("with_first_frame", "with_edges"):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        return int(raw)
    except ValueError:
        raise ValueError(f"line {lineno}: bad value {raw!r} for {key}") from None
