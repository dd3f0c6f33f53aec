import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from video_adapter.adapter import (CompositionConfig, FunctionScoreSource, LocalScoreSource, SamplingError,
                                   adapter_cfg_eps, cfg_eps, cfg_mix_eps, cfg_mix_sample, cfg_sample, composed_eps,
                                   video_adapter_sample)
from video_adapter.core_math import KeyedRng, eps_to_score, make_schedule, score_to_eps
from video_adapter.denoiser import ArchitectureDescriptor, ConditionSpec, init_denoiser
from video_adapter.oracle import GridDensity, enumerate_product, gmm_logpdf, gmm_noisy_score, kl_divergence
from video_adapter.worlds import GMMSpec

SCHED = make_schedule(12, -8, 8)
SHAPE = (3, 2, 8, 8, 1)


@pytest.fixture(scope="module")
def models():
    adapter = init_denoiser(ArchitectureDescriptor(SHAPE[1:], 4, 1, 4, 3, precondition="v"), 1, SCHED)
    prior = init_denoiser(ArchitectureDescriptor(SHAPE[1:], 6, 1, 4, 3, precondition="v"), 2, SCHED)
    return LocalScoreSource(adapter), LocalScoreSource(prior)


COND = ConditionSpec(label_id=np.array([0, 1, 2]))


# ---------------------------------------------------------------- algebra

def test_composed_eps_examples():
    a, p = np.array([0.3]), np.array([-0.1])
    assert composed_eps(a, p, 0.2)[0] == pytest.approx(0.28)
    assert composed_eps(a, p, 0.0).tobytes() == a.tobytes()
    with pytest.raises(ValueError):
        composed_eps(a, np.zeros(2), 0.1)
    with pytest.raises(ValueError):
        composed_eps(a, p, -0.1)


def test_adapter_cfg_eps_examples():
    z, one = np.zeros(4), np.ones(4)
    np.testing.assert_array_equal(adapter_cfg_eps(z, one, one, 2.0, 0.5), np.full(4, 3.0))
    g = np.random.default_rng(0)
    u, c, p = g.standard_normal((3, 10))
    assert adapter_cfg_eps(u, c, p, 1.0, 0.0).tobytes() == c.tobytes()
    assert adapter_cfg_eps(u, c, p, 0.0, 0.7).tobytes() == u.tobytes()
    with pytest.raises(ValueError):
        adapter_cfg_eps(u, c, p[:5], 2.0, 0.1)


def test_cfg_mix_examples():
    g = np.random.default_rng(1)
    au, ac, pu, pc = g.standard_normal((4, 6))
    np.testing.assert_array_equal(cfg_mix_eps((au, ac), (pu, pc), 2.0, 0.0), cfg_eps(au, ac, 2.0))
    np.testing.assert_array_equal(cfg_mix_eps((au, ac), (pu, pc), 2.0, 1.0), cfg_eps(pu, pc, 2.0))
    z, o = np.zeros(3), np.ones(3)
    np.testing.assert_allclose(cfg_mix_eps((z, o), (z, o), 2.0, 0.5), np.full(3, 2.0))
    with pytest.raises(ValueError):
        cfg_mix_eps((z, o), (z, o), 2.0, 1.5)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(a=arrays(np.float64, 5, elements=finite), p=arrays(np.float64, 5, elements=finite),
       gamma=st.floats(0, 5), t=st.integers(1, 12))
def test_eps_and_score_composition_agree(a, p, gamma, t):
    lhs = eps_to_score(composed_eps(a, p, gamma), t, SCHED)
    rhs = eps_to_score(a, t, SCHED) + gamma * eps_to_score(p, t, SCHED)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(u=arrays(np.float64, 4, elements=finite), c=arrays(np.float64, 4, elements=finite),
       p=arrays(np.float64, 4, elements=finite), alpha=st.floats(0, 5), gamma=st.floats(0, 5))
def test_guided_composition_is_exact_reductions(u, c, p, alpha, gamma):
    assert composed_eps(c, p, 0.0).tobytes() == c.tobytes()
    assert adapter_cfg_eps(u, c, p, 0.0, gamma).tobytes() == u.tobytes()
    assert adapter_cfg_eps(u, c, p, 1.0, 0.0).tobytes() == c.tobytes()


def test_config_validation_and_cutoff():
    assert CompositionConfig().cutoff_steps(1000) == 100
    for bad in (dict(gamma=-1), dict(alpha=-0.5), dict(cutoff_fraction=1.5), dict(mcmc_steps=-1),
                dict(mcmc_steps=2, mcmc_step_size=0.0)):
        with pytest.raises(ValueError):
            CompositionConfig(**bad)


# ---------------------------------------------------------------- sampler reductions (bitwise)

def test_gamma_zero_matches_adapter_cfg(models):
    adapter, prior = models
    cfg = CompositionConfig(gamma=0.0, alpha=2.0, cutoff_fraction=0.0)
    composed = video_adapter_sample(adapter, prior, cfg, SCHED, SHAPE, COND, KeyedRng(7))
    plain = cfg_sample(adapter, 2.0, SCHED, SHAPE, COND, KeyedRng(7))
    assert composed.tobytes() == plain.tobytes()


def test_alpha_zero_is_unconditional(models):
    adapter, prior = models
    cfg = CompositionConfig(gamma=0.3, alpha=0.0, cutoff_fraction=0.0)
    composed = video_adapter_sample(adapter, prior, cfg, SCHED, SHAPE, COND, KeyedRng(3))
    uncond = cfg_sample(adapter, 1.0, SCHED, SHAPE, ConditionSpec.null(), KeyedRng(3))
    assert composed.tobytes() == uncond.tobytes()


def test_alpha_one_gamma_zero_is_conditional(models):
    adapter, prior = models
    cfg = CompositionConfig(gamma=0.0, alpha=1.0, cutoff_fraction=0.3)
    composed = video_adapter_sample(adapter, prior, cfg, SCHED, SHAPE, COND, KeyedRng(3))
    cond = cfg_sample(adapter, 1.0, SCHED, SHAPE, COND, KeyedRng(3))
    assert composed.tobytes() == cond.tobytes()


def test_full_cutoff_ignores_prior(models):
    adapter, prior = models
    cfg = CompositionConfig(gamma=0.4, alpha=2.0, cutoff_fraction=1.0)
    a = video_adapter_sample(adapter, prior, cfg, SCHED, SHAPE, COND, KeyedRng(5))
    b = cfg_sample(adapter, 2.0, SCHED, SHAPE, COND, KeyedRng(5))
    assert a.tobytes() == b.tobytes()


def test_prior_changes_samples(models):
    adapter, prior = models
    a = video_adapter_sample(adapter, prior, CompositionConfig(gamma=0.4), SCHED, SHAPE, COND, KeyedRng(5))
    b = cfg_sample(adapter, 2.0, SCHED, SHAPE, COND, KeyedRng(5))
    assert not np.array_equal(a, b)


def test_parallel_calls_are_deterministic(models):
    adapter, prior = models
    cfg = CompositionConfig(gamma=0.2)
    a = video_adapter_sample(adapter, prior, cfg, SCHED, SHAPE, COND, KeyedRng(9), parallel=True)
    b = video_adapter_sample(adapter, prior, cfg, SCHED, SHAPE, COND, KeyedRng(9), parallel=False)
    assert a.tobytes() == b.tobytes()


def test_cfg_mix_weight_zero_is_adapter_cfg(models):
    adapter, prior = models
    a = cfg_mix_sample(adapter, prior, 2.0, 0.0, SCHED, SHAPE, COND, KeyedRng(2))
    b = cfg_sample(adapter, 2.0, SCHED, SHAPE, COND, KeyedRng(2))
    assert a.tobytes() == b.tobytes()


def test_failing_source_reports_step(models):
    adapter, _ = models

    def boom(x, t):
        if t == 7:
            raise ConnectionError("prior went away")
        return np.zeros_like(x)

    with pytest.raises(SamplingError) as err:
        video_adapter_sample(adapter, FunctionScoreSource(boom), CompositionConfig(gamma=0.2), SCHED, SHAPE, COND,
                             KeyedRng(0))
    assert err.value.step == 7


def test_wrong_shape_from_source_is_an_error(models):
    adapter, _ = models
    bad = FunctionScoreSource(lambda x, t: np.zeros(x.shape[:-1]))
    with pytest.raises(SamplingError):
        video_adapter_sample(adapter, bad, CompositionConfig(gamma=0.2), SCHED, SHAPE, COND, KeyedRng(0))


def test_adapter_without_uncond_branch_rejected(models):
    _, prior = models
    with pytest.raises(ValueError):
        video_adapter_sample(FunctionScoreSource(lambda x, t: x), prior, CompositionConfig(), SCHED, SHAPE, COND,
                             KeyedRng(0))


# ---------------------------------------------------------------- density-level properties

GRID = ((-6.0, 6.0), (-6.0, 6.0)), (48, 48)
A = GMMSpec.isotropic([[-2.0, 0.0], [2.0, 0.0]], std=0.7)
P = GMMSpec.isotropic([[2.0, 0.0], [0.0, 3.0]], std=1.0)


def _tempered(spec, power):
    return GridDensity.from_logpdf(lambda x: power * gmm_logpdf(x, spec), *GRID)


def test_role_swap_at_unit_gamma_is_exact():
    ab = enumerate_product(_tempered(A, 1.0), _tempered(P, 1.0))
    ba = enumerate_product(_tempered(P, 1.0), _tempered(A, 1.0))
    assert kl_divergence(ab, ba) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("gamma", [0.25, 0.5, 2.0])
def test_role_swap_with_reciprocal_gamma(gamma):
    """Swapping roles with 1/gamma gives the same product at inverse temperature 1/gamma."""
    ab = enumerate_product(_tempered(A, 1.0), _tempered(P, gamma))
    ba = enumerate_product(_tempered(P, 1.0), _tempered(A, 1.0 / gamma))
    tempered_ab = GridDensity(ab.ranges, ab.shape, ab.mass ** (1.0 / gamma))
    assert kl_divergence(ba, tempered_ab) < 1e-10


def _analytic_source(spec, sched):
    f = lambda x, t: score_to_eps(gmm_noisy_score(x, t, spec, sched), t, sched)
    return FunctionScoreSource(f, f)


def _shared_mode_fraction(gamma, seed):
    sched = make_schedule(100, -10, 10)
    cfg = CompositionConfig(gamma=gamma, alpha=1.0, cutoff_fraction=0.0)
    x = video_adapter_sample(_analytic_source(A, sched), _analytic_source(P, sched), cfg, sched, (3000, 2),
                             ConditionSpec(label_id=0), KeyedRng(seed))
    return float(np.mean(x[:, 0] > 0))


def test_prior_influence_is_monotone_in_gamma():
    gammas = (0.0, 0.25, 0.5, 1.0)
    votes = 0
    for seed in range(3):
        fr = [_shared_mode_fraction(g, seed) for g in gammas]
        votes += all(b >= a for a, b in zip(fr, fr[1:]))
    assert votes >= 2
