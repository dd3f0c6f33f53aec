import numpy as np
import pytest
import scipy.linalg

from video_adapter.core_math import make_schedule
from video_adapter.denoiser import ArchitectureDescriptor, init_denoiser
from video_adapter.eval import (BenchmarkError, BenchmarkReport, BenchmarkRow, FeatureProbe, FeatureStats,
                                extract_features, finetune_baseline, finetune_budget, frechet_distance)
from video_adapter.eval.metrics import stats_from_features
from video_adapter.worlds import ToyVideoSpec, gen_toy_videos


def _stats(mean, cov, n=100):
    return FeatureStats(np.asarray(mean, float), np.asarray(cov, float), n)


def test_frechet_identical_is_zero():
    g = np.random.default_rng(0)
    a = g.standard_normal((6, 6))
    s = _stats(g.standard_normal(6), a @ a.T)
    assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("d", [0.0, 0.5, 3.0])
def test_frechet_mean_shift(d):
    a = _stats(np.zeros(4), np.eye(4))
    b = _stats(np.array([d, 0, 0, 0]), np.eye(4))
    assert abs(frechet_distance(a, b) - d * d) <= 1e-6


def _reference_frechet(a, b):
    covmean = scipy.linalg.sqrtm(a.cov @ b.cov).real
    return float(np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov + b.cov - 2 * covmean))


def test_frechet_matches_second_implementation():
    g = np.random.default_rng(3)
    for _ in range(5):
        m1, m2 = g.standard_normal((2, 4, 4))
        a = _stats(g.standard_normal(4), m1 @ m1.T + 0.1 * np.eye(4))
        b = _stats(g.standard_normal(4), m2 @ m2.T + 0.1 * np.eye(4))
        assert abs(frechet_distance(a, b) - _reference_frechet(a, b)) <= 1e-6
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-9)


def test_frechet_rank_deficient_is_nonnegative():
    v = np.ones((3, 1))
    a = _stats(np.zeros(3), v @ v.T)
    b = _stats(np.zeros(3), np.diag([1.0, 0.0, 0.0]))
    assert frechet_distance(a, b) >= 0.0


def test_frechet_dimension_mismatch():
    with pytest.raises(ValueError):
        frechet_distance(_stats(np.zeros(2), np.eye(2)), _stats(np.zeros(3), np.eye(3)))


@pytest.fixture(scope="module")
def clips():
    return gen_toy_videos(ToyVideoSpec(styles=(3,), count=400, seed=2)).videos


def test_probe_shape_and_duplication(clips):
    probe = FeatureProbe(channels=1, n_filters=8, seed=1)
    s = extract_features(clips[:50], probe)
    assert s.dim == probe.out_dim == 16
    doubled = extract_features(np.concatenate([clips[:50], clips[:50]]), probe)
    np.testing.assert_allclose(doubled.cov, s.cov, atol=1e-12)
    np.testing.assert_allclose(doubled.mean, s.mean, atol=1e-12)


def test_probe_is_frozen_by_seed():
    a, b, c = FeatureProbe(seed=5), FeatureProbe(seed=5), FeatureProbe(seed=6)
    assert a.digest() == b.digest() != c.digest()


def test_extract_features_needs_two():
    with pytest.raises(ValueError):
        extract_features(np.zeros((1, 8, 16, 16, 1)), FeatureProbe())
    with pytest.raises(ValueError):
        stats_from_features(np.zeros((1, 4)))


def test_disjoint_halves_within_bootstrap_bound(clips):
    probe = FeatureProbe(n_filters=16)
    feats = probe.features(clips)
    half = len(feats) // 2
    observed = frechet_distance(stats_from_features(feats[:half]), stats_from_features(feats[half:]))
    g = np.random.default_rng(0)
    boot = []
    for _ in range(200):
        i = g.choice(len(feats), size=len(feats), replace=True)
        boot.append(frechet_distance(stats_from_features(feats[i[:half]]), stats_from_features(feats[i[half:]])))
    assert observed <= np.quantile(boot, 0.99)


def test_shifted_style_scores_worse(clips):
    probe = FeatureProbe()
    ref = extract_features(clips[:200], probe)
    same = extract_features(clips[200:], probe)
    other = extract_features(gen_toy_videos(ToyVideoSpec(styles=(0,), count=200, seed=3)).videos, probe)
    assert frechet_distance(same, ref) < frechet_distance(other, ref)


# ---------------------------------------------------------------- report bookkeeping

def test_report_rows_are_unique_and_finite():
    rep = BenchmarkReport(seeds=(0,))
    rep.add(BenchmarkRow("adapter", 0, 1.5, 10, 10, 0.1, 0.2))
    with pytest.raises(BenchmarkError):
        rep.add(BenchmarkRow("adapter", 0, 1.6, 10, 10, 0.1, 0.2))
    with pytest.raises(BenchmarkError):
        rep.add(BenchmarkRow("pretrained", 0, float("nan"), 10, 0, 0.1, 0.2))
    rep.add(BenchmarkRow("video_adapter", 0, 1.0, 20, 10, 0.1, 0.2))
    assert rep.frechet("video_adapter", 0) == 1.0
    assert rep.wins("video_adapter", ["adapter"]) == 1
    tsv = rep.to_tsv().splitlines()
    assert tsv[0].split("\t") == ["config", "seed", "frechet", "params", "adapted_params", "train_s", "sample_s"]
    assert len(tsv) == 3


def test_finetune_budget_and_single_step():
    assert finetune_budget(800, 12_000, 60_000) == 160
    assert finetune_budget(1, 1, 10**6) == 1
    sched = make_schedule(10)
    ck = init_denoiser(ArchitectureDescriptor((4, 8, 8, 1), 4, 1, 4, 3), 0, sched)
    data = gen_toy_videos(ToyVideoSpec(grid=8, frames=4, shape_size=3, styles=(3,), count=20, seed=1))
    with pytest.raises(ValueError):
        finetune_baseline(ck, data, 0, sched)
    ft, losses = finetune_baseline(ck, data, 1, sched)
    assert losses.shape == (1,) and np.isfinite(losses[0])
    assert ft.metadata["train_steps"] == 1
    assert not np.array_equal(ft.params, ck.params)
