import numpy as np
import pytest

from video_adapter.core_math import KeyedRng, make_schedule, tweedie_posterior_mean
from video_adapter.oracle import (EnergyFunction, GridDensity, NonFiniteEnergyError, ZeroMassError, closure_checks,
                                  enumerate_product, finite_diff_grad, gmm_energy, gmm_logpdf, gmm_noisy_logpdf,
                                  gmm_noisy_score, gmm_score, gmm_smoothed_score, histogram_kl, kl_divergence,
                                  langevin_sample, posterior_mean_quadrature, product_target, total_variation)
from video_adapter.worlds import GMMSpec

SCHED = make_schedule(100)


# ---------------------------------------------------------------- noisy scores

def test_single_gaussian_score_closed_form():
    mu, var = np.array([0.5, -1.0]), 0.3
    spec = GMMSpec(mu[None], np.full((1, 2), var), [1.0])
    x = np.random.default_rng(0).standard_normal((7, 2))
    for t in (1, 30, 77, 100):
        ab = SCHED.alpha_bar[t]
        expected = -(x - np.sqrt(ab) * mu) / (ab * var + 1 - ab)
        np.testing.assert_allclose(gmm_noisy_score(x, t, spec, SCHED), expected, rtol=1e-12, atol=1e-14)


def test_symmetric_mixture_score_vanishes_at_origin():
    spec = GMMSpec.isotropic([[-1.3, 2.0], [1.3, -2.0]], 0.6)
    for t in (1, 50, 100):
        np.testing.assert_allclose(gmm_noisy_score(np.zeros((1, 2)), t, spec, SCHED), 0.0, atol=1e-14)


def test_score_matches_finite_differences():
    spec = GMMSpec([[0.0, 1.0], [2.0, -1.0], [-1.5, 0.5]], [[0.3, 0.8], [1.0, 0.4], [0.5, 0.5]], [0.2, 0.5, 0.3])
    g = np.random.default_rng(1)
    for _ in range(10):
        x = g.uniform(-3, 3, 2)
        t = int(g.integers(1, 101))
        fd = finite_diff_grad(lambda z: float(gmm_noisy_logpdf(z[None], t, spec, SCHED)[0]), x, h=1e-4)
        an = gmm_noisy_score(x[None], t, spec, SCHED)[0]
        assert np.linalg.norm(fd - an) / np.linalg.norm(an) <= 1e-6


def test_score_is_stable_far_from_modes():
    spec = GMMSpec.isotropic([[-1.0], [1.0]], 0.05)
    s = gmm_score(np.array([[60.0], [-60.0]]), spec)
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s[:, 0], [-59.0 / 0.0025, 59.0 / 0.0025], rtol=1e-12)


def test_noisy_score_invalid_step():
    spec = GMMSpec.isotropic([[0.0]])
    with pytest.raises(ValueError):
        gmm_noisy_score(np.zeros((1, 1)), 0, spec, SCHED)
    with pytest.raises(ValueError):
        gmm_noisy_score(np.zeros((1, 1)), 101, spec, SCHED)


# ---------------------------------------------------------------- grid densities

RANGES, SHAPE = ((-4.0, 4.0), (-4.0, 4.0)), (32, 32)


def test_uniform_factor_is_identity():
    uni = GridDensity(RANGES, SHAPE, np.ones(SHAPE))
    p = GridDensity.from_logpdf(lambda x: gmm_logpdf(x, GMMSpec.isotropic([[1.0, 0.0]], 0.7)), RANGES, SHAPE)
    out = enumerate_product(uni, p)
    np.testing.assert_allclose(out.mass, p.mass, rtol=1e-12)
    assert out.mass.sum() == pytest.approx(1.0, abs=1e-10)


def test_disjoint_supports_raise_zero_mass():
    a = np.zeros(SHAPE)
    b = np.zeros(SHAPE)
    a[:16] = 1.0
    b[16:] = 1.0
    with pytest.raises(ZeroMassError):
        enumerate_product(GridDensity(RANGES, SHAPE, a), GridDensity(RANGES, SHAPE, b))


def test_product_matches_refined_quadrature():
    coarse = product_target(subdivisions=8)
    fine = product_target(subdivisions=32)
    assert total_variation(coarse, fine) <= 1e-3


def test_grid_mismatch_rejected():
    a = GridDensity(RANGES, SHAPE, np.ones(SHAPE))
    b = GridDensity(RANGES, (16, 16), np.ones((16, 16)))
    for fn in (enumerate_product, kl_divergence, total_variation):
        with pytest.raises(ValueError):
            fn(a, b)


def test_kl_properties():
    p = GridDensity.from_logpdf(lambda x: gmm_logpdf(x, GMMSpec.isotropic([[0.0, 0.0]], 1.0)), RANGES, SHAPE)
    q = GridDensity.from_logpdf(lambda x: gmm_logpdf(x, GMMSpec.isotropic([[0.5, 0.0]], 1.0)), RANGES, SHAPE)
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)
    # Gaussian shift of 0.5 with unit variance: KL = 0.125 (slightly less on a truncated grid)
    assert 0.11 < kl_divergence(p, q) < 0.13


def test_histogram_of_exact_draws_is_close():
    spec = GMMSpec.isotropic([[-1.0, 0.0], [1.5, 1.0]], 0.8)
    target = GridDensity.from_logpdf(lambda x: gmm_logpdf(x, spec), RANGES, SHAPE, subdivisions=4)
    from video_adapter.worlds import gen_gmm_samples
    assert histogram_kl(gen_gmm_samples(spec, 50_000, 0), target) < 0.02


# ---------------------------------------------------------------- langevin

def test_langevin_zero_steps_returns_init():
    x0 = np.random.default_rng(0).standard_normal((5, 2))
    out = langevin_sample(lambda x, t: -x, x0, 0, SCHED, KeyedRng(0))
    assert np.array_equal(out, x0)
    with pytest.raises(ValueError):
        langevin_sample(lambda x, t: -x, x0, -1, SCHED, KeyedRng(0))


def test_langevin_standard_gaussian_moments():
    n = 10_000
    x0 = KeyedRng(3).generator("init").uniform(-3, 3, (n, 2))
    levels = [1] * 1
    out = langevin_sample(lambda x, t: -x, x0, 400, SCHED, KeyedRng(3), step_sizes=np.full(101, 0.05),
                          levels=levels)
    # unadjusted Langevin with step eta has stationary variance 1 / (1 - eta / 2)
    var_target = 1.0 / (1.0 - 0.025)
    se = np.sqrt(var_target / n)
    assert np.all(np.abs(out.mean(0)) < 3 * se)
    cov = np.cov(out.T)
    se_var = var_target * np.sqrt(2.0 / n)
    assert np.all(np.abs(np.diag(cov) - var_target) < 3 * se_var)
    assert abs(cov[0, 1]) < 3 * var_target / np.sqrt(n)


def test_langevin_nonfinite_score_raises():
    with pytest.raises(NonFiniteEnergyError):
        langevin_sample(lambda x, t: np.full_like(x, np.nan), np.zeros((2, 2)), 1, SCHED, KeyedRng(0))


def test_energy_sum_is_product_density():
    a, b = GMMSpec.isotropic([[0.0, 0.0]], 1.0), GMMSpec.isotropic([[1.0, 1.0]], 0.5)
    e = gmm_energy(a) + gmm_energy(b)
    x = np.random.default_rng(2).standard_normal((6, 2))
    np.testing.assert_allclose(e.energy(x), -gmm_logpdf(x, a) - gmm_logpdf(x, b))
    np.testing.assert_allclose(e.gradient(x), -gmm_score(x, a) - gmm_score(x, b))
    fd_only = EnergyFunction(e.energy, 2)
    np.testing.assert_allclose(fd_only.gradient(x), e.gradient(x), rtol=1e-6, atol=1e-8)


# ---------------------------------------------------------------- quadrature and tweedie

def test_quadrature_gaussian_prior():
    spec = GMMSpec.isotropic([[0.0]], 1.0)
    for y in (-2.0, 0.3, 2.0):
        assert posterior_mean_quadrature([y], spec, 1.0)[0] == pytest.approx(y / 2.0, abs=1e-6)


def test_quadrature_point_mass_limit():
    spec = GMMSpec([[0.7, -0.2]], np.full((1, 2), 1e-8), [1.0])
    np.testing.assert_allclose(posterior_mean_quadrature([2.0, 1.0], spec, 0.5), [0.7, -0.2], atol=1e-4)


def test_quadrature_agrees_with_tweedie_three_components():
    spec = GMMSpec([[-2.0], [0.5], [3.0]], [[0.4], [1.0], [0.2]], [0.3, 0.5, 0.2])
    for y, sigma in ((-1.0, 0.8), (1.7, 1.5), (4.0, 0.5)):
        m = tweedie_posterior_mean(np.array([y]), gmm_smoothed_score(np.array([[y]]), spec, sigma)[0], sigma)
        q = posterior_mean_quadrature([y], spec, sigma)
        assert abs(m[0] - q[0]) <= 1e-3 * max(1.0, abs(q[0]))


def test_quadrature_rejects_high_dimension():
    with pytest.raises(ValueError):
        posterior_mean_quadrature(np.zeros(3), GMMSpec.isotropic([[0.0, 0.0, 0.0]]), 1.0)


# ---------------------------------------------------------------- finite differences

def test_finite_diff_quadratic_and_linear():
    x = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(finite_diff_grad(lambda z: 0.5 * z @ z, x, 1e-4), x, atol=1e-8)
    c = np.array([1.5, -2.0, 0.25])
    np.testing.assert_allclose(finite_diff_grad(lambda z: c @ z, x, 1e-3), c, atol=1e-10)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda z: 0.0, x, 0.0)


def test_finite_diff_matches_mixture_score():
    spec = GMMSpec.isotropic([[-1.0, 0.5], [2.0, 0.0]], 0.9)
    x = np.array([0.4, -0.3])
    fd = finite_diff_grad(lambda z: float(gmm_logpdf(z[None], spec)[0]), x, 1e-4)
    an = gmm_score(x[None], spec)[0]
    assert np.linalg.norm(fd - an) / np.linalg.norm(an) <= 1e-6


# ---------------------------------------------------------------- closure loops

def test_closure_loops_hold():
    results = closure_checks(seed=0)
    for r in results:
        print(f"{r.name}: {r.value:.3g} (tolerance {r.tolerance:g})")
    assert all(r.passed for r in results)
