"""Frozen random-feature probe and the Frechet distance between Gaussian feature fits.

The probe is a desk-scale stand-in for the pretrained video networks behind FVD/FID; its
numbers are only comparable within one probe (same seed, same hash).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("feature statistics need at least 2 samples")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match the mean")

    @property
    def dim(self) -> int:
        return int(self.mean.size)


class FeatureProbe:
    """Random 3x3x3 spatio-temporal filters, ReLU, then mean- and max-pooling over space and time.

    Output dimension is ``2 * n_filters``. Filters are drawn from N(0, 1/fan_in) with a fixed seed.
    """

    def __init__(self, channels: int = 1, n_filters: int = 32, seed: int = 1234, kernel: tuple = (3, 3, 3)):
        self.channels = int(channels)
        self.n_filters = int(n_filters)
        self.seed = int(seed)
        self.kernel = tuple(int(k) for k in kernel)
        kt, kh, kw = self.kernel
        fan_in = kt * kh * kw * self.channels
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))
        self.weights = rng.standard_normal((kt, kh, kw, self.channels, self.n_filters)) / np.sqrt(fan_in)
        self.bias = 0.1 * rng.standard_normal(self.n_filters)
        self.weights.setflags(write=False)
        self.bias.setflags(write=False)

    @property
    def out_dim(self) -> int:
        return 2 * self.n_filters

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.kernel, dtype="<i8").tobytes())
        h.update(self.weights.astype("<f8").tobytes())
        h.update(self.bias.astype("<f8").tobytes())
        return h.hexdigest()

    def config(self) -> dict:
        return {"channels": self.channels, "n_filters": self.n_filters, "seed": self.seed,
                "kernel": list(self.kernel), "sha256": self.digest()}

    def features(self, videos: np.ndarray, chunk: int = 64) -> np.ndarray:
        """``(N, H, height, width, channels)`` -> ``(N, out_dim)`` in float64."""
        videos = np.asarray(videos, dtype=np.float64)
        if videos.ndim != 5 or videos.shape[-1] != self.channels:
            raise ValueError(f"expected (N, H, height, width, {self.channels}) videos")
        kt, kh, kw = self.kernel
        out = []
        for s in range(0, videos.shape[0], chunk):
            v = videos[s:s + chunk]
            win = sliding_window_view(v, (kt, kh, kw), axis=(1, 2, 3))  # (n, T', H', W', C, kt, kh, kw)
            resp = np.einsum("nthwcijk,ijkcf->nthwf", win, self.weights, optimize=True) + self.bias
            resp = np.maximum(resp, 0.0)
            flat = resp.reshape(resp.shape[0], -1, self.n_filters)
            out.append(np.concatenate([flat.mean(axis=1), flat.max(axis=1)], axis=1))
        return np.concatenate(out, axis=0)


def stats_from_features(feats: np.ndarray) -> FeatureStats:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    mu = feats.mean(axis=0)
    centered = feats - mu
    cov = centered.T @ centered / feats.shape[0]  # population covariance
    return FeatureStats(mu, 0.5 * (cov + cov.T), feats.shape[0])


def extract_features(videos, probe: FeatureProbe) -> FeatureStats:
    videos = np.asarray(videos)
    if videos.shape[0] < 2:
        raise ValueError("need at least 2 videos")
    return stats_from_features(probe.features(videos))


def _sym_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` via symmetric eigendecompositions.

    ``tr (S_a S_b)^(1/2)`` is evaluated as ``tr (S_a^(1/2) S_b S_a^(1/2))^(1/2)``, which has the same
    eigenvalues and stays symmetric; negative eigenvalues are clipped to zero.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    ra = _sym_sqrt(a.cov)
    m = ra @ b.cov @ ra
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    tr_sqrt = float(np.sum(np.sqrt(np.clip(eig, 0.0, None))))
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(d, 0.0)
