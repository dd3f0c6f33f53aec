"""Independent ground truth for the low-dimensional domains.

Everything here runs in float64 and relies only on closed forms, enumeration and quadrature,
never on the sampler or network code it is used to check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from .core_math import KeyedRng, NoiseSchedule
from .worlds import GMMSpec

KL_SMOOTHING = 1e-12


class ZeroMassError(ValueError):
    """The product of two densities has no mass on the grid (disjoint supports)."""


class NonFiniteEnergyError(FloatingPointError):
    pass


# --------------------------------------------------------------------------- mixture scores

def _gmm_conv(x: np.ndarray, spec: GMMSpec, scale: float, noise_var: float):
    """Log-density and score of ``sum_k w_k N(scale * mu_k, scale^2 * var_k + noise_var)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.dim:
        raise ValueError(f"points have dimension {x.shape[-1]}, mixture has {spec.dim}")
    m = scale * spec.means                                 # (K, D)
    v = scale**2 * spec.variances + noise_var              # (K, D)
    diff = x[..., None, :] - m                             # (..., K, D)
    logn = -0.5 * np.sum(diff**2 / v + np.log(2.0 * np.pi * v), axis=-1)
    logp_k = np.log(spec.weights) + logn                   # (..., K)
    logp = logsumexp(logp_k, axis=-1)
    resp = np.exp(logp_k - logp[..., None])
    score = -np.sum(resp[..., None] * diff / v, axis=-2)
    return logp, score


def gmm_noisy_logpdf(x, t: int, spec: GMMSpec, sched: NoiseSchedule) -> np.ndarray:
    t = sched.check_step(t)
    ab = sched.alpha_bar[t]
    return _gmm_conv(x, spec, np.sqrt(ab), sched.sigma_bar[t] ** 2)[0]


def gmm_noisy_score(x, t: int, spec: GMMSpec, sched: NoiseSchedule) -> np.ndarray:
    """Score of the variance-preserving noised mixture at step ``t``."""
    t = sched.check_step(t)
    ab = sched.alpha_bar[t]
    return _gmm_conv(x, spec, np.sqrt(ab), sched.sigma_bar[t] ** 2)[1]


def gmm_logpdf(x, spec: GMMSpec) -> np.ndarray:
    return _gmm_conv(x, spec, 1.0, 0.0)[0]


def gmm_score(x, spec: GMMSpec) -> np.ndarray:
    return _gmm_conv(x, spec, 1.0, 0.0)[1]


def gmm_smoothed_score(y, spec: GMMSpec, sigma: float) -> np.ndarray:
    """Score of the mixture convolved with ``N(0, sigma^2 I)`` (additive, unscaled noise)."""
    return _gmm_conv(y, spec, 1.0, float(sigma) ** 2)[1]


# --------------------------------------------------------------------------- grid densities

@dataclass(eq=False)
class GridDensity:
    """Cell masses on a regular grid; ``ranges[d] = (lo, hi)`` and ``shape[d]`` cells per axis."""

    ranges: tuple
    shape: tuple
    mass: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        self.ranges = tuple((float(lo), float(hi)) for lo, hi in self.ranges)
        self.shape = tuple(int(s) for s in self.shape)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.mass.shape != self.shape:
            raise ValueError(f"mass shape {self.mass.shape} does not match grid {self.shape}")
        if np.any(self.mass < 0) or not np.all(np.isfinite(self.mass)):
            raise ValueError("masses must be finite and non-negative")
        if self.normalized:
            total = self.mass.sum()
            if total <= 0:
                raise ZeroMassError("density has no mass")
            self.mass = self.mass / total

    def edges(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(self.ranges, self.shape)]

    def centers(self) -> np.ndarray:
        axes = [0.5 * (e[1:] + e[:-1]) for e in self.edges()]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def same_grid(self, other: "GridDensity") -> bool:
        return self.ranges == other.ranges and self.shape == other.shape

    @classmethod
    def from_logpdf(cls, logpdf: Callable[[np.ndarray], np.ndarray], ranges, shape,
                    subdivisions: int = 1) -> "GridDensity":
        """Cell masses by midpoint rule on ``subdivisions``-times refined cells."""
        ranges = tuple(ranges)
        shape = tuple(int(s) for s in shape)
        fine = GridDensity(ranges, tuple(s * subdivisions for s in shape),
                           np.ones(tuple(s * subdivisions for s in shape)), normalized=False)
        lp = logpdf(fine.centers())
        w = np.exp(lp - np.max(lp))
        for axis, s in enumerate(shape):
            w = w.reshape(w.shape[:axis] + (s, subdivisions) + w.shape[axis + 1:]).sum(axis=axis + 1)
        return cls(ranges, shape, w)

    @classmethod
    def from_samples(cls, samples: np.ndarray, ranges, shape) -> "GridDensity":
        """Normalized histogram; samples outside the grid are dropped."""
        samples = np.asarray(samples, dtype=np.float64)
        counts, _ = np.histogramdd(samples, bins=[np.linspace(lo, hi, n + 1) for (lo, hi), n
                                                  in zip(ranges, shape)])
        return cls(ranges, shape, counts)


def enumerate_product(p1: GridDensity, p2: GridDensity) -> GridDensity:
    """Pointwise product of two densities on a shared grid, renormalized."""
    if not p1.same_grid(p2):
        raise ValueError("densities must share the same grid")
    prod = p1.mass * p2.mass
    if prod.sum() <= 0:
        raise ZeroMassError("product density is zero everywhere (disjoint supports)")
    return GridDensity(p1.ranges, p1.shape, prod)


def kl_divergence(p: GridDensity, q: GridDensity, smoothing: float = KL_SMOOTHING) -> float:
    """``KL(p || q)`` with ``smoothing`` added to every bin of both sides before renormalizing."""
    if not p.same_grid(q):
        raise ValueError("densities must share the same grid")
    a = p.mass + smoothing
    b = q.mass + smoothing
    a = a / a.sum()
    b = b / b.sum()
    return float(np.sum(a * (np.log(a) - np.log(b))))


def total_variation(p: GridDensity, q: GridDensity) -> float:
    if not p.same_grid(q):
        raise ValueError("densities must share the same grid")
    return 0.5 * float(np.abs(p.mass - q.mass).sum())


def histogram_kl(samples: np.ndarray, target: GridDensity) -> float:
    """``KL(empirical || target)`` over the target's bins."""
    emp = GridDensity.from_samples(samples, target.ranges, target.shape)
    return kl_divergence(emp, target)


# --------------------------------------------------------------------------- langevin

@dataclass(frozen=True)
class EnergyFunction:
    """Scalar energy ``E(x)`` (``p ~ exp(-E)``) with an optional analytic gradient."""

    energy: Callable[[np.ndarray], np.ndarray]
    dim: int
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def gradient(self, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
        if self.grad is not None:
            return np.asarray(self.grad(x), dtype=np.float64)
        return finite_diff_grad_batched(self.energy, x, h)

    def __add__(self, other: "EnergyFunction") -> "EnergyFunction":
        if self.dim != other.dim:
            raise ValueError("energy dimensions differ")
        g = None
        if self.grad is not None and other.grad is not None:
            g = lambda x: self.grad(x) + other.grad(x)  # noqa: E731
        return EnergyFunction(lambda x: self.energy(x) + other.energy(x), self.dim, g)


def langevin_sample(score: Callable[[np.ndarray, int], np.ndarray], x_init: np.ndarray, steps: int,
                    sched: NoiseSchedule, rng: KeyedRng, step_scale: float = 0.1,
                    step_sizes: Optional[Sequence[float]] = None, levels: Optional[Sequence[int]] = None,
                    energy: Optional[Callable[[np.ndarray, int], np.ndarray]] = None) -> np.ndarray:
    """Annealed unadjusted Langevin dynamics over the schedule's noise levels.

    ``score(x, t)`` is the (analytic) score of the level-``t`` target. At each level ``steps``
    updates ``x += eta * score + sqrt(2 eta) * z`` are run with ``eta = step_scale * sigma_bar[t]^2``
    unless ``step_sizes[t]`` overrides it. ``levels`` defaults to ``T, T-1, ..., 1``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x = np.array(x_init, dtype=np.float64, copy=True)
    if steps == 0:
        return x
    if levels is None:
        levels = range(sched.num_steps, 0, -1)
    for t in levels:
        t = sched.check_step(t)
        eta = step_scale * sched.sigma_bar[t] ** 2 if step_sizes is None else float(step_sizes[t])
        g = rng.generator("langevin", t)
        for k in range(steps):
            s = np.asarray(score(x, t), dtype=np.float64)
            if not np.all(np.isfinite(s)) or (energy is not None and not np.all(np.isfinite(energy(x, t)))):
                raise NonFiniteEnergyError(f"non-finite energy/score at level {t}, step {k}")
            x = x + eta * s + np.sqrt(2.0 * eta) * g.standard_normal(x.shape)
    return x


# --------------------------------------------------------------------------- posterior mean

def posterior_mean_quadrature(y, spec: GMMSpec, sigma: float, epsabs: float = 1e-6) -> np.ndarray:
    """``E[x | y]`` for ``x ~ spec`` and ``y = x + sigma * n`` by adaptive quadrature.

    With diagonal components and isotropic noise each component's integral factorizes over
    coordinates, so only 1-D integrals are evaluated (in standardized coordinates).
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if spec.dim > 2:
        raise ValueError("quadrature oracle supports dimension <= 2")
    if y.shape[0] != spec.dim:
        raise ValueError("observation dimension does not match the mixture")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    s2 = float(sigma) ** 2
    K, D = spec.means.shape
    log_z = np.zeros(K)
    means = np.zeros((K, D))
    for k in range(K):
        for d in range(D):
            mu = spec.means[k, d]
            sd = np.sqrt(spec.variances[k, d])
            yd = y[d]

            def log_f(u, mu=mu, sd=sd, yd=yd):
                x = mu + sd * u
                return -0.5 * u**2 - 0.5 * (yd - x) ** 2 / s2

            u_grid = np.linspace(-40.0, 40.0, 16001)
            peak_u = float(u_grid[np.argmax(log_f(u_grid))])
            shift = float(log_f(peak_u))
            # scale the integrand by exp(-shift) so underflow never decides the answer
            lo, hi = min(-12.0, peak_u - 12.0), max(12.0, peak_u + 12.0)
            pts = [peak_u] if lo < peak_u < hi else None
            z0, _ = integrate.quad(lambda u: np.exp(log_f(u) - shift), lo, hi, points=pts,
                                   epsabs=epsabs * 1e-3, epsrel=1e-12, limit=500)
            z1, _ = integrate.quad(lambda u: (mu + sd * u) * np.exp(log_f(u) - shift), lo, hi,
                                   points=pts, epsabs=epsabs * 1e-3, epsrel=1e-12, limit=500)
            means[k, d] = z1 / z0
            # normalizing constants of N(u; 0, 1) and N(y; x, sigma^2) in x = mu + sd u
            log_z[k] += np.log(z0) + shift - 0.5 * np.log(2 * np.pi) - 0.5 * np.log(2 * np.pi * s2)
    log_post = np.log(spec.weights) + log_z
    r = np.exp(log_post - logsumexp(log_post))
    return r @ means


# --------------------------------------------------------------------------- finite differences

def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_grad_batched(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-5) -> np.ndarray:
    """Central differences for ``f`` mapping ``(N, D)`` points to ``(N,)`` values."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for d in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[d] = h
        grad[..., d] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h)
    return grad


def gmm_energy(spec: GMMSpec) -> EnergyFunction:
    return EnergyFunction(lambda x: -gmm_logpdf(x, spec), spec.dim, lambda x: -gmm_score(x, spec))


# --------------------------------------------------------------------------- closure loops

@dataclass(frozen=True)
class ClosureResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tolerance)


def random_mixture(rng: np.random.Generator, dim: int, k: int) -> GMMSpec:
    w = rng.uniform(0.5, 1.5, size=k)
    return GMMSpec(rng.uniform(-3, 3, size=(k, dim)), rng.uniform(0.2, 1.5, size=(k, dim)), w / w.sum())


def closure_tweedie(seed: int = 0, n_mixtures: int = 5, points: int = 4) -> ClosureResult:
    """Worst relative gap between ``y + sigma^2 * score`` and the quadrature posterior mean."""
    from .core_math import tweedie_posterior_mean

    g = KeyedRng(seed).generator("closure", "tweedie")
    worst = 0.0
    for i in range(n_mixtures):
        spec = random_mixture(g, dim=1 + i % 2, k=int(g.integers(2, 4)))
        for _ in range(points):
            sigma = float(g.uniform(0.3, 2.0))
            y = g.uniform(-4, 4, size=spec.dim)
            m = tweedie_posterior_mean(y, gmm_smoothed_score(y[None], spec, sigma)[0], sigma)
            q = posterior_mean_quadrature(y, spec, sigma)
            worst = max(worst, float(np.max(np.abs(m - q) / np.maximum(np.abs(q), 1e-3))))
    return ClosureResult("tweedie-vs-quadrature", worst, 1e-3)


PRODUCT_FACTORS = (GMMSpec.isotropic([[-1.5, 0.0], [1.5, 0.5]], std=0.8),
                   GMMSpec.isotropic([[1.0, 1.0], [-1.0, -1.5]], std=1.0))
PRODUCT_GRID = (((-5.0, 5.0), (-5.0, 5.0)), (64, 64))


def product_target(factors=PRODUCT_FACTORS, grid=PRODUCT_GRID, subdivisions: int = 8) -> GridDensity:
    ranges, shape = grid
    a, b = factors
    return enumerate_product(GridDensity.from_logpdf(lambda x: gmm_logpdf(x, a), ranges, shape, subdivisions),
                             GridDensity.from_logpdf(lambda x: gmm_logpdf(x, b), ranges, shape, subdivisions))


def closure_product(seed: int = 0, n: int = 50_000, steps: int = 20, num_levels: int = 100) -> ClosureResult:
    """Annealed Langevin on the summed analytic scores vs the enumerated normalized product."""
    from .core_math import make_schedule

    a, b = PRODUCT_FACTORS
    sched = make_schedule(num_levels)
    rng = KeyedRng(seed)
    x0 = rng.generator("closure", "init").standard_normal((n, 2))
    xs = langevin_sample(lambda x, t: gmm_noisy_score(x, t, a, sched) + gmm_noisy_score(x, t, b, sched),
                         x0, steps, sched, rng.child("closure", "langevin"))
    return ClosureResult("langevin-sum-vs-product", histogram_kl(xs, product_target()), 0.05)


def closure_finite_diff(seed: int = 0, n_points: int = 20, h: float = 1e-4) -> ClosureResult:
    """Worst relative gap between central differences of log-density and the analytic scores."""
    from .core_math import make_schedule

    g = KeyedRng(seed).generator("closure", "fd")
    sched = make_schedule(100)
    worst = 0.0
    for i in range(n_points):
        spec = random_mixture(g, dim=2, k=3)
        x = g.uniform(-3, 3, size=2)
        t = int(g.integers(1, sched.num_steps + 1))
        checks = ((lambda z: float(gmm_logpdf(z[None], spec)[0]), gmm_score(x[None], spec)[0]),
                  (lambda z: float(gmm_noisy_logpdf(z[None], t, spec, sched)[0]),
                   gmm_noisy_score(x[None], t, spec, sched)[0]))
        for f, analytic in checks:
            fd = finite_diff_grad(f, x, h)
            worst = max(worst, float(np.linalg.norm(fd - analytic) / max(np.linalg.norm(analytic), 1e-12)))
    return ClosureResult("finite-diff-vs-analytic-score", worst, 1e-6)


def closure_checks(seed: int = 0) -> list[ClosureResult]:
    return [closure_tweedie(seed), closure_product(seed), closure_finite_diff(seed)]
