"""Noise schedules, forward noising, the ancestral DDPM step and score identities.

Conventions used throughout the package:

* ``alpha_bar[t]`` is the cumulative signal fraction, ``sigma_bar[t] = sqrt(1 - alpha_bar[t])``.
  Index 0 is the clean data (``alpha_bar[0] = 1``).
* A noisy sample is ``x_t = sqrt(alpha_bar[t]) * x_0 + sigma_bar[t] * eps``.
* The epsilon prediction and the score of the noisy marginal are related by
  ``eps = -sigma_bar[t] * grad log p_t(x_t)``.

The reverse update is written as ``x_{t-1} = a_t * (x_t - g_t * eps) + s_t * xi`` with the
standard ancestral DDPM posterior coefficients::

    beta_t = 1 - alpha_bar[t] / alpha_bar[t-1]
    a_t    = 1 / sqrt(1 - beta_t)                     # decay on the denoised sample
    g_t    = beta_t / sigma_bar[t]                    # denoising step size
    s_t^2  = beta_t * sigma_bar[t-1]^2 / sigma_bar[t]^2   # "small" posterior variance

The noise term is added outside the decay factor.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "KeyedRng",
    "NoiseSchedule",
    "NoisySample",
    "make_schedule",
    "forward_noise",
    "denoising_loss",
    "ddpm_step",
    "sample_loop",
    "clip_denoised_eps",
    "tweedie_posterior_mean",
    "eps_to_score",
    "score_to_eps",
]


def _purpose_id(part: Any) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("rng key parts must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


@dataclass(frozen=True)
class KeyedRng:
    """Counter-style random streams addressed by ``(seed, *key)``.

    Every draw in the package comes from ``KeyedRng(seed).generator(step, purpose, ...)``,
    a Philox generator whose state depends only on the key, never on call order.
    """

    seed: int

    def generator(self, *key: Any) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=tuple(_purpose_id(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *key: Any) -> "KeyedRng":
        """A derived stream family; used to hand independent seeds to sub-procedures."""
        g = self.generator("child", *key)
        return KeyedRng(int(g.integers(0, 2**63 - 1)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Variance-preserving schedule. Arrays are indexed by step ``t`` in ``0..T``."""

    num_steps: int
    logsnr_min: float
    logsnr_max: float
    alpha_bar: np.ndarray
    sigma_bar: np.ndarray
    logsnr: np.ndarray
    beta: np.ndarray
    step_decay: np.ndarray
    step_size: np.ndarray
    step_std: np.ndarray

    @classmethod
    def from_alpha_bar(cls, alpha_bar: Sequence[float], sigma_bar: Sequence[float] | None = None,
                       logsnr_min: float = float("nan"), logsnr_max: float = float("nan")) -> "NoiseSchedule":
        """Build from ``alpha_bar[1..T]`` (strictly decreasing, in (0, 1]); any ``T >= 1``."""
        ab = np.asarray(alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 1:
            raise ValueError("alpha_bar must be a non-empty 1-D sequence")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        sb = np.sqrt(1.0 - ab) if sigma_bar is None else np.asarray(sigma_bar, dtype=np.float64)
        T = ab.size
        ab_full = np.concatenate([[1.0], ab])
        sb_full = np.concatenate([[0.0], sb])
        var_full = sb_full**2
        with np.errstate(divide="ignore"):
            logsnr = np.log(ab_full) - np.log(var_full)
        beta = np.zeros(T + 1)
        # 1 - ab_t / ab_{t-1} written to avoid cancellation when both are close to 1
        beta[1:] = (ab_full[:-1] - ab_full[1:]) / ab_full[:-1]
        beta[1] = var_full[1]
        step_decay = np.zeros(T + 1)
        step_size = np.zeros(T + 1)
        step_std = np.zeros(T + 1)
        step_decay[1:] = 1.0 / np.sqrt(1.0 - beta[1:])
        # a step with sigma_bar == 0 is the identity: no noise to remove, none to add
        noisy = sb_full[1:] > 0
        step_size[1:] = np.divide(beta[1:], sb_full[1:], out=np.zeros(T), where=noisy)
        ratio = np.divide(var_full[:-1], var_full[1:], out=np.zeros(T), where=noisy)
        step_std[1:] = np.sqrt(np.clip(beta[1:] * ratio, 0.0, None))
        for arr in (ab_full, sb_full, beta, step_decay, step_size, step_std):
            arr.setflags(write=False)
        logsnr.setflags(write=False)
        if not all(np.all(np.isfinite(a[1:])) for a in (beta, step_decay, step_size, step_std)):
            raise ValueError("schedule produced non-finite step coefficients")
        return cls(T, float(logsnr_min), float(logsnr_max), ab_full, sb_full, logsnr, beta,
                   step_decay, step_size, step_std)

    @property
    def T(self) -> int:
        return self.num_steps

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"step {t} outside schedule range 1..{self.num_steps}")
        return t

    def summary(self) -> dict:
        return {"T": self.num_steps, "logsnr_min": self.logsnr_min, "logsnr_max": self.logsnr_max}


def make_schedule(T: int, logsnr_min: float = -20.0, logsnr_max: float = 20.0) -> NoiseSchedule:
    """Linear log-SNR ramp from ``logsnr_max`` at ``t=1`` down to ``logsnr_min`` at ``t=T``."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not logsnr_min < logsnr_max:
        raise ValueError("logsnr_min must be smaller than logsnr_max")
    T = int(T)
    t = np.arange(1, T + 1, dtype=np.float64)
    lam = logsnr_max + (logsnr_min - logsnr_max) * (t - 1.0) / (T - 1.0)
    ab = _sigmoid(lam)
    sb = np.sqrt(_sigmoid(-lam))
    return NoiseSchedule.from_alpha_bar(ab, sb, logsnr_min, logsnr_max)


@dataclass(frozen=True, eq=False)
class NoisySample:
    """A (batch of) noisy tensor(s) at step ``t``; ``t = 0`` means fully denoised."""

    x: np.ndarray
    t: int


def forward_noise(tau: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> NoisySample:
    tau = np.asarray(tau)
    eps = np.asarray(eps)
    if tau.shape != eps.shape:
        raise ValueError(f"shape mismatch: tau {tau.shape} vs eps {eps.shape}")
    t = sched.check_step(t)
    dtype = np.result_type(tau.dtype, eps.dtype, np.float32)
    x = np.sqrt(sched.alpha_bar[t]).astype(dtype) * tau + sched.sigma_bar[t].astype(dtype) * eps
    return NoisySample(x.astype(dtype, copy=False), t)


EpsFn = Callable[[NoisySample, Any], np.ndarray]


def denoising_loss(predict: EpsFn, batch: Sequence[tuple[np.ndarray, Any]], sched: NoiseSchedule,
                   rng: KeyedRng) -> float:
    """Mean over the batch of ``||eps - predict(x_t, t, cond)||^2``.

    For item ``i`` the step is drawn uniformly from ``1..T`` and the noise from a standard
    normal, both from the stream ``rng.generator("loss", i)``.
    """
    if len(batch) == 0:
        raise ValueError("denoising_loss needs a non-empty batch")
    total = 0.0
    for i, (tau, cond) in enumerate(batch):
        g = rng.generator("loss", i)
        t = int(g.integers(1, sched.num_steps + 1))
        tau = np.asarray(tau, dtype=np.float64)
        eps = g.standard_normal(tau.shape)
        noisy = forward_noise(tau, t, eps, sched)
        pred = np.asarray(predict(noisy, cond), dtype=np.float64)
        if pred.shape != eps.shape:
            raise ValueError(f"predictor returned shape {pred.shape}, expected {eps.shape}")
        total += float(np.sum((eps - pred) ** 2))
    return total / len(batch)


def ddpm_step(sample: NoisySample, eps_pred: np.ndarray, sched: NoiseSchedule,
              rng: np.random.Generator | None = None, deterministic: bool = False) -> NoisySample:
    """One ancestral step ``t -> t-1`` (coefficients documented in the module docstring)."""
    if sample.t < 1:
        raise ValueError("cannot step below t = 0")
    t = sched.check_step(sample.t)
    x = np.asarray(sample.x)
    eps_pred = np.asarray(eps_pred)
    if eps_pred.shape != x.shape:
        raise ValueError(f"shape mismatch: sample {x.shape} vs eps {eps_pred.shape}")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    decay = sched.step_decay[t].astype(dtype)
    size = sched.step_size[t].astype(dtype)
    out = decay * (x - size * eps_pred.astype(dtype, copy=False))
    std = sched.step_std[t]
    if not deterministic and std > 0:
        if rng is None:
            raise ValueError("a generator is required for a stochastic step")
        out = out + std.astype(dtype) * rng.standard_normal(x.shape).astype(dtype, copy=False)
    return NoisySample(out.astype(dtype, copy=False), t - 1)


def sample_loop(eps_fn: EpsFn, sched: NoiseSchedule, shape: Iterable[int], cond: Any, rng: KeyedRng,
                dtype=np.float32, deterministic: bool = False) -> np.ndarray:
    """Ancestral sampling from ``x_T ~ N(0, I)``; ``eps_fn`` returns epsilon predictions."""
    shape = tuple(int(s) for s in shape)
    x = rng.generator("init").standard_normal(shape).astype(dtype)
    sample = NoisySample(x, sched.num_steps)
    for t in range(sched.num_steps, 0, -1):
        eps = eps_fn(sample, cond)
        sample = ddpm_step(sample, eps, sched, rng.generator("ddpm", t), deterministic=deterministic)
    return sample.x


def clip_denoised_eps(sample: NoisySample, eps_pred: np.ndarray, sched: NoiseSchedule,
                      lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Epsilon whose implied clean estimate is clipped to ``[lo, hi]``.

    ``x0 = (x - sigma_bar * eps) / sqrt(alpha_bar)`` is clipped and mapped back, so feeding the
    result to :func:`ddpm_step` gives the posterior mean around the clipped estimate, as the
    reference DDPM sampler does for data known to live in a box.
    """
    t = sched.check_step(sample.t)
    x = np.asarray(sample.x)
    eps_pred = np.asarray(eps_pred)
    if eps_pred.shape != x.shape:
        raise ValueError(f"shape mismatch: sample {x.shape} vs eps {eps_pred.shape}")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    sa = np.sqrt(sched.alpha_bar[t])
    sb = sched.sigma_bar[t]
    x0 = np.clip((x - sb * eps_pred) / sa, lo, hi)
    return ((x - sa * x0) / sb).astype(dtype, copy=False)


def tweedie_posterior_mean(y: np.ndarray, score_at_y: np.ndarray, sigma: float) -> np.ndarray:
    """Posterior mean of clean data under additive Gaussian noise of std ``sigma``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    y = np.asarray(y)
    score_at_y = np.asarray(score_at_y)
    if y.shape != score_at_y.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {score_at_y.shape}")
    return y + sigma**2 * score_at_y


def eps_to_score(eps_pred: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    t = sched.check_step(t)
    sb = sched.sigma_bar[t]
    if sb == 0:
        raise ValueError("sigma_bar is zero at this step")
    eps_pred = np.asarray(eps_pred)
    dtype = np.result_type(eps_pred.dtype, np.float32)
    return -eps_pred / sb.astype(dtype)


def score_to_eps(score: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    t = sched.check_step(t)
    score = np.asarray(score)
    dtype = np.result_type(score.dtype, np.float32)
    return -score * sched.sigma_bar[t].astype(dtype)
