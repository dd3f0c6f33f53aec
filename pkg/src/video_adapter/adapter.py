"""Score composition of a small adapter denoiser with a frozen pretrained prior.

The sampler evaluates, at every step ``t``::

    text = eps_adapter(x, t | c) + gamma * eps_pretrained(x, t | c)
    eps  = eps_adapter(x, t) + alpha * (text - eps_adapter(x, t))

and feeds ``eps`` to the ancestral DDPM step. The pretrained model is only ever queried with
conditioning; the unconditional branch comes from the adapter.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Protocol, runtime_checkable

import numpy as np

from .core_math import KeyedRng, NoiseSchedule, NoisySample, clip_denoised_eps, ddpm_step, eps_to_score
from .denoiser.checkpoint import DenoiserCheckpoint, predict_eps
from .denoiser.conditioning import ConditionSpec

DEFAULT_ALPHA = 2.0
DEFAULT_GAMMA = 0.2
DEFAULT_CUTOFF = 0.1
# prior strengths used for the three kinds of adaptation target
REPORTED_GAMMAS = {"robot": 0.1, "egocentric": 0.2, "stylization": 0.4}


class SamplingError(RuntimeError):
    """A score source failed while sampling; ``step`` is the reverse-chain step index."""

    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"sampling failed at step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class CompositionConfig:
    gamma: float = DEFAULT_GAMMA
    alpha: float = DEFAULT_ALPHA
    cutoff_fraction: float = DEFAULT_CUTOFF
    mcmc_steps: int = 0
    mcmc_step_size: float = 0.1

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.cutoff_fraction <= 1.0:
            raise ValueError("cutoff_fraction must lie in [0, 1]")
        if self.mcmc_steps < 0 or int(self.mcmc_steps) != self.mcmc_steps:
            raise ValueError("mcmc_steps must be a non-negative integer")
        if self.mcmc_steps > 0 and not self.mcmc_step_size > 0:
            raise ValueError("mcmc_step_size must be positive")

    def cutoff_steps(self, T: int) -> int:
        """Number of final steps (``t = 1..k``) in which the prior term is dropped."""
        return int(round(self.cutoff_fraction * T))

    def to_dict(self) -> dict:
        return asdict(self)


@runtime_checkable
class ScoreSource(Protocol):
    """Anything that returns epsilon predictions for a batch at step ``t``."""

    has_uncond: bool

    def eps(self, sample: NoisySample, cond: ConditionSpec) -> np.ndarray: ...


class LocalScoreSource:
    """Score source backed by an in-process checkpoint."""

    def __init__(self, ckpt: DenoiserCheckpoint):
        self.ckpt = ckpt
        self.has_uncond = True

    def eps(self, sample: NoisySample, cond: ConditionSpec) -> np.ndarray:
        return predict_eps(self.ckpt, sample, cond)


class FunctionScoreSource:
    """Wraps analytic epsilon functions ``f(x, t)``; ``uncond`` may be omitted."""

    def __init__(self, cond_fn: Callable[[np.ndarray, int], np.ndarray],
                 uncond_fn: Optional[Callable[[np.ndarray, int], np.ndarray]] = None):
        self.cond_fn = cond_fn
        self.uncond_fn = uncond_fn
        self.has_uncond = uncond_fn is not None

    def eps(self, sample: NoisySample, cond: ConditionSpec) -> np.ndarray:
        if cond is not None and cond.is_null:
            if self.uncond_fn is None:
                raise ValueError("score source has no unconditional branch")
            return self.uncond_fn(sample.x, sample.t)
        return self.cond_fn(sample.x, sample.t)


def _check_shapes(*arrays):
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {np.shape(a)}")


def composed_eps(eps_adapter, eps_pretrained, gamma: float):
    """Epsilon of the product ``p_adapter * p_pretrained^gamma``."""
    _check_shapes(eps_adapter, eps_pretrained)
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if gamma == 0:
        return np.array(eps_adapter, copy=True)
    return eps_adapter + gamma * eps_pretrained


def cfg_eps(eps_uncond, eps_cond, alpha: float):
    """Classifier-free guidance ``u + alpha * (c - u)``; ``alpha`` in {0, 1} reduce exactly."""
    _check_shapes(eps_uncond, eps_cond)
    if alpha == 0:
        return np.array(eps_uncond, copy=True)
    if alpha == 1:
        return np.array(eps_cond, copy=True)
    return eps_uncond + alpha * (eps_cond - eps_uncond)


def adapter_cfg_eps(eps_uncond, eps_cond_adapter, eps_cond_pretrained, alpha: float, gamma: float):
    """Guided composition: the adapter's unconditional score against the composed conditional."""
    _check_shapes(eps_uncond, eps_cond_adapter, eps_cond_pretrained)
    text = composed_eps(eps_cond_adapter, eps_cond_pretrained, gamma)
    return cfg_eps(eps_uncond, text, alpha)


def cfg_mix_eps(adapter_pair, pretrained_pair, alpha: float, weight: float):
    """Ablation baseline: interpolate the two models' complete guided scores."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must lie in [0, 1]")
    _check_shapes(*adapter_pair, *pretrained_pair)
    if weight == 0:
        return cfg_eps(*adapter_pair, alpha)
    if weight == 1:
        return cfg_eps(*pretrained_pair, alpha)
    return (1.0 - weight) * cfg_eps(*adapter_pair, alpha) + weight * cfg_eps(*pretrained_pair, alpha)


def _call(source: ScoreSource, x, t, cond, step):
    try:
        out = source.eps(NoisySample(x, t), cond)
    except SamplingError:
        raise
    except Exception as exc:  # remote and model failures surface with the step index
        raise SamplingError(step, exc) from exc
    out = np.asarray(out)
    if out.shape != x.shape:
        raise SamplingError(step, ValueError(f"score source returned shape {out.shape}, expected {x.shape}"))
    return out


def reverse_chain(eps_fn: Callable[[np.ndarray, int], np.ndarray], sched: NoiseSchedule, shape, rng: KeyedRng,
                  mcmc_steps: int = 0, mcmc_step_size: float = 0.1, dtype=np.float32,
                  x_init: Optional[np.ndarray] = None, x0_range: Optional[tuple] = None) -> np.ndarray:
    """Ancestral sampling driven by ``eps_fn(x, t)``, optionally with Langevin corrector steps.

    Corrector update at level ``t``: ``x += eta * score + sqrt(2 * eta) * z`` with
    ``eta = mcmc_step_size * sigma_bar[t]^2`` and ``score = -eps / sigma_bar[t]``.
    With ``x0_range = (lo, hi)`` each ancestral step uses the clean estimate clipped to that box.
    """
    shape = tuple(int(s) for s in shape)
    x = rng.generator("init").standard_normal(shape).astype(dtype) if x_init is None else np.array(x_init, dtype=dtype)
    for t in range(sched.num_steps, 0, -1):
        if mcmc_steps:
            eta = mcmc_step_size * sched.sigma_bar[t] ** 2
            for k in range(mcmc_steps):
                score = eps_to_score(eps_fn(x, t), t, sched)
                z = rng.generator("mcmc", t, k).standard_normal(shape).astype(dtype)
                x = (x + dtype(eta) * score + dtype(np.sqrt(2.0 * eta)) * z).astype(dtype, copy=False)
        eps = eps_fn(x, t)
        if x0_range is not None:
            eps = clip_denoised_eps(NoisySample(x, t), eps, sched, *x0_range)
        x = ddpm_step(NoisySample(x, t), eps, sched, rng.generator("ddpm", t)).x
    return x


def _pair(pool, f1, f2):
    if pool is None:
        return f1(), f2()
    a, b = pool.submit(f1), pool.submit(f2)
    return a.result(), b.result()


def video_adapter_sample(adapter: ScoreSource, pretrained: ScoreSource, cfg: CompositionConfig,
                         sched: NoiseSchedule, shape, cond: ConditionSpec, rng: KeyedRng,
                         parallel: bool = False, x0_range: Optional[tuple] = None) -> np.ndarray:
    """Sample from the guided product of the adapter and the prior.

    In the final ``cfg.cutoff_steps(T)`` steps the prior term is dropped (the adapter's guidance
    is kept). With ``parallel`` the unconditional adapter call and the prior call run on two
    threads; their results are combined in a fixed order.
    """
    if not adapter.has_uncond:
        raise ValueError("the adapter must provide an unconditional branch")
    null = cond.as_null()
    cut = cfg.cutoff_steps(sched.num_steps)

    def eps_fn(x, t):
        use_prior = cfg.gamma > 0 and t > cut
        e_c = _call(adapter, x, t, cond, t)
        if cfg.alpha == 1:
            e_u = np.zeros_like(e_c)  # unused: alpha = 1 drops the unconditional term
            e_p = _call(pretrained, x, t, cond, t) if use_prior else None
        elif use_prior:
            e_u, e_p = _pair(pool, lambda: _call(adapter, x, t, null, t), lambda: _call(pretrained, x, t, cond, t))
        else:
            e_u, e_p = _call(adapter, x, t, null, t), None
        if e_p is None:
            return cfg_eps(e_u, e_c, cfg.alpha)
        return adapter_cfg_eps(e_u, e_c, e_p, cfg.alpha, cfg.gamma)

    pool = ThreadPoolExecutor(max_workers=2) if parallel else None
    try:
        return reverse_chain(eps_fn, sched, shape, rng, cfg.mcmc_steps, cfg.mcmc_step_size, x0_range=x0_range)
    finally:
        if pool is not None:
            pool.shutdown()


def cfg_sample(source: ScoreSource, alpha: float, sched: NoiseSchedule, shape, cond: ConditionSpec,
               rng: KeyedRng, mcmc_steps: int = 0, mcmc_step_size: float = 0.1,
               x0_range: Optional[tuple] = None) -> np.ndarray:
    """Single-model classifier-free-guided sampling."""
    null = cond.as_null()

    def eps_fn(x, t):
        e_c = _call(source, x, t, cond, t)
        if alpha == 1:
            return cfg_eps(np.zeros_like(e_c), e_c, alpha)
        return cfg_eps(_call(source, x, t, null, t), e_c, alpha)

    return reverse_chain(eps_fn, sched, shape, rng, mcmc_steps, mcmc_step_size, x0_range=x0_range)


def cfg_mix_sample(adapter: ScoreSource, pretrained: ScoreSource, alpha: float, weight: float,
                   sched: NoiseSchedule, shape, cond: ConditionSpec, rng: KeyedRng,
                   cutoff_fraction: float = DEFAULT_CUTOFF, x0_range: Optional[tuple] = None) -> np.ndarray:
    """Sampling with the interpolated guided scores; the weight is zeroed inside the cutoff."""
    if not pretrained.has_uncond:
        raise ValueError("CFG-Mix needs the prior's unconditional branch")
    null = cond.as_null()
    cut = int(round(cutoff_fraction * sched.num_steps))

    def eps_fn(x, t):
        a = (_call(adapter, x, t, null, t), _call(adapter, x, t, cond, t))
        w = weight if t > cut else 0.0
        if w == 0:
            return cfg_eps(*a, alpha)
        p = (_call(pretrained, x, t, null, t), _call(pretrained, x, t, cond, t))
        return cfg_mix_eps(a, p, alpha, w)

    return reverse_chain(eps_fn, sched, shape, rng, x0_range=x0_range)
