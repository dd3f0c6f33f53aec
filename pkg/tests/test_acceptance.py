"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``. The benchmark criteria (5 to 7) share a single
three-seed benchmark run at the default configuration, which takes several minutes on one core.
"""

import socket
import threading
import time

import numpy as np
import pytest
import torch

from video_adapter.adapter import (CompositionConfig, FunctionScoreSource, LocalScoreSource, cfg_sample,
                                   video_adapter_sample)
from video_adapter.config import RunConfig
from video_adapter.core_math import KeyedRng, NoisySample, eps_to_score, make_schedule, score_to_eps
from video_adapter.denoiser import (ArchitectureDescriptor, ConditionSpec, TrainConfig, energy_value, init_denoiser,
                                    make_first_frame_condition, param_count, predict_eps, sobel_edges,
                                    train_denoiser)
from video_adapter.denoiser.checkpoint import build_module
from video_adapter.denoiser.train import TrainingArrays, batch_loss, draw_batch
from video_adapter.eval import FeatureStats, frechet_distance, run_benchmark
from video_adapter.oracle import (PRODUCT_FACTORS, closure_tweedie, finite_diff_grad, gmm_noisy_score,
                                  histogram_kl, product_target)
from video_adapter.scorewire import RemoteScoreSource, ScoreClient, ScoreRequest, ScoreServer
from video_adapter.scorewire.protocol import encode_request, frame
from video_adapter.worlds import GMMSpec, gen_gmm_samples


@pytest.fixture
def verdict(capsys):
    def emit(number, passed, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")
        return passed
    return emit


def _analytic(spec, sched):
    f = lambda x, t: score_to_eps(gmm_noisy_score(x, t, spec, sched), t, sched)
    return FunctionScoreSource(f, f)


# ---------------------------------------------------------------- 1

def test_criterion_1_product_composition(verdict):
    t0 = time.perf_counter()
    a, b = PRODUCT_FACTORS
    sched = make_schedule(100)
    cfg = CompositionConfig(gamma=1.0, alpha=1.0, cutoff_fraction=0.0, mcmc_steps=10, mcmc_step_size=0.1)
    x = video_adapter_sample(_analytic(a, sched), _analytic(b, sched), cfg, sched, (50_000, 2),
                             ConditionSpec(label_id=0), KeyedRng(0))
    kl = histogram_kl(x, product_target())
    secs = time.perf_counter() - t0
    assert verdict(1, kl <= 0.05 and secs < 300, f"KL {kl:.4f} <= 0.05 on 64x64, {secs:.0f}s < 300s")


# ---------------------------------------------------------------- 2

def _gmm_cosine():
    sched = make_schedule(1000)
    spec = GMMSpec.isotropic([[-2.0, 0.0], [2.0, 1.0], [0.0, -2.0]], std=0.5)
    data = gen_gmm_samples(spec, 20_000, 0).astype(np.float32)
    desc = ArchitectureDescriptor((2,), width=128, blocks=3, temb_dim=16, precondition="sigma")
    ck, _ = train_denoiser(init_denoiser(desc, 0, sched), data,
                           TrainConfig(steps=8000, batch_size=256, lr=1e-3, cond_dropout=0.0), sched)
    cos = []
    for t in range(101, 901, 10):  # middle 80% of the noise levels
        x0 = gen_gmm_samples(spec, 500, 100 + t)
        noise = KeyedRng(t).generator("eps").standard_normal(x0.shape)
        x = np.sqrt(sched.alpha_bar[t]) * x0 + sched.sigma_bar[t] * noise
        pred = eps_to_score(predict_eps(ck, NoisySample(x.astype(np.float32), t), ConditionSpec.null(),
                                        dtype=torch.float64), t, sched)
        true = gmm_noisy_score(x, t, spec, sched)
        c = np.sum(true * pred, 1) / (np.linalg.norm(true, axis=1) * np.linalg.norm(pred, axis=1))
        cos.append(c.mean())
    return float(np.mean(cos))


def test_criterion_2_tweedie_and_loss_minimizer(verdict):
    t0 = time.perf_counter()
    tw = closure_tweedie(seed=0, n_mixtures=5)
    cos = _gmm_cosine()
    secs = time.perf_counter() - t0
    ok = tw.passed and cos >= 0.95 and secs < 600
    assert verdict(2, ok, f"tweedie rel gap {tw.value:.1e} <= 1e-3, score cosine {cos:.3f} >= 0.95, "
                          f"{secs:.0f}s < 600s")


# ---------------------------------------------------------------- 3

def test_criterion_3_exact_reductions(verdict):
    sched = make_schedule(12, -6, 8)
    shape = (3, 4, 8, 8, 1)
    A = LocalScoreSource(init_denoiser(ArchitectureDescriptor(shape[1:], 4, 1, 4, 3), 1, sched))
    P = LocalScoreSource(init_denoiser(ArchitectureDescriptor(shape[1:], 6, 1, 4, 3), 2, sched))
    cond = ConditionSpec(label_id=np.array([0, 1, 2]))
    checks = []
    for seed in range(3):
        r = lambda: KeyedRng(seed)
        checks.append(video_adapter_sample(A, P, CompositionConfig(gamma=0.0, alpha=2.0, cutoff_fraction=0.0),
                                           sched, shape, cond, r()).tobytes()
                      == cfg_sample(A, 2.0, sched, shape, cond, r()).tobytes())
        checks.append(video_adapter_sample(A, P, CompositionConfig(gamma=0.5, alpha=0.0), sched, shape, cond,
                                           r()).tobytes()
                      == cfg_sample(A, 1.0, sched, shape, ConditionSpec.null(), r()).tobytes())
        checks.append(video_adapter_sample(A, P, CompositionConfig(gamma=0.0, alpha=1.0), sched, shape, cond,
                                           r()).tobytes()
                      == cfg_sample(A, 1.0, sched, shape, cond, r()).tobytes())
    assert verdict(3, all(checks), f"{sum(checks)}/{len(checks)} bitwise reductions hold over 3 seeds")


# ---------------------------------------------------------------- 4

def test_criterion_4_gradient_integrity(verdict):
    sched = make_schedule(50, -10, 10)
    ck = init_denoiser(ArchitectureDescriptor((3,), 8, 2, 4, 2, energy=True, precondition="v"), 2, sched)
    rng = np.random.default_rng(0)
    cond = ConditionSpec(label_id=1)
    worst_e = 0.0
    for t in (3, 20, 45):
        for _ in range(4):
            x = rng.standard_normal(3)
            eps = predict_eps(ck, NoisySample(x[None], t), cond, dtype=torch.float64)[0]
            fd = finite_diff_grad(lambda z: float(energy_value(ck, NoisySample(z[None], t), cond)[0]), x, h=1e-5)
            worst_e = max(worst_e, np.linalg.norm(eps - fd) / np.linalg.norm(fd))

    desc = ArchitectureDescriptor((1,), 1, 0, 2, 2)
    small = init_denoiser(desc, 0, sched)
    mod = build_module(desc, small.params, torch.float64)
    data = TrainingArrays(np.array([[0.5], [-1.0], [0.2]]), np.array([0, 1, 0]))
    x0, t, eps, labels, aux = draw_batch(data, sched, TrainConfig(1, 8, cond_dropout=0.3, seed=4), 0,
                                         mod.null_index, "none")
    theta = torch.nn.utils.parameters_to_vector(mod.parameters()).detach().clone()

    def loss_at(vec):
        torch.nn.utils.vector_to_parameters(torch.as_tensor(vec, dtype=torch.float64), mod.parameters())
        return batch_loss(mod, x0, t, eps, labels, aux, sched, torch.float64)

    grad = torch.autograd.grad(loss_at(theta), list(mod.parameters()))
    analytic = torch.cat([g.reshape(-1) for g in grad]).numpy()
    fd = finite_diff_grad(lambda v: float(loss_at(v).detach()), theta.numpy(), h=1e-6)
    worst_p = np.linalg.norm(analytic - fd) / np.linalg.norm(fd)
    ok = worst_e <= 1e-4 and worst_p <= 1e-4 and param_count(desc) == 10
    assert verdict(4, ok, f"energy eps rel err {worst_e:.1e}, 10-parameter trainer grad rel err {worst_p:.1e}")


# ---------------------------------------------------------------- 5 to 7

@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    report = run_benchmark(RunConfig())
    return report, time.perf_counter() - t0


def _row(report, name):
    return " ".join(f"{report.frechet(name, s):.2f}" for s in report.seeds)


def test_criterion_5_composed_beats_both_parts(benchmark, verdict):
    report, secs = benchmark
    wins = report.wins("video_adapter", ["adapter", "pretrained"])
    ok = wins >= 2 and secs < 1800
    assert verdict(5, ok, f"composed beats both in {wins}/3 seeds; frechet composed [{_row(report, 'video_adapter')}]"
                          f" adapter [{_row(report, 'adapter')}] pretrained [{_row(report, 'pretrained')}]; "
                          f"benchmark {secs:.0f}s < 1800s")


def test_criterion_6_cfg_mix_not_better(benchmark, verdict):
    report, _ = benchmark
    n = report.at_least("cfg_mix", "video_adapter")
    assert verdict(6, n >= 2, f"cfg_mix >= composed in {n}/3 seeds; cfg_mix [{_row(report, 'cfg_mix')}] "
                              f"composed [{_row(report, 'video_adapter')}]")


def test_criterion_7_finetune_not_better(benchmark, verdict):
    report, _ = benchmark
    n = report.at_least("finetune", "video_adapter")
    assert verdict(7, n >= 2, f"finetune >= composed in {n}/3 seeds; finetune [{_row(report, 'finetune')}] "
                              f"composed [{_row(report, 'video_adapter')}]")


# ---------------------------------------------------------------- 8

def test_criterion_8_metric_correctness(verdict):
    g = np.random.default_rng(0)
    m = g.standard_normal((5, 5))
    s = FeatureStats(g.standard_normal(5), m @ m.T, 100)
    same = frechet_distance(s, s)
    worst = abs(same)
    for d in (0.0, 0.5, 2.0, 7.0):
        a = FeatureStats(np.zeros(5), np.eye(5), 100)
        b = FeatureStats(np.r_[d, np.zeros(4)], np.eye(5), 100)
        worst = max(worst, abs(frechet_distance(a, b) - d * d))
    assert verdict(8, worst <= 1e-6, f"worst deviation {worst:.1e} <= 1e-6")


# ---------------------------------------------------------------- 9

def test_criterion_9_wire_fidelity(verdict):
    sched = make_schedule(10, -6, 8)
    shape = (2, 8, 8, 1)
    prior = init_denoiser(ArchitectureDescriptor(shape, 6, 1, 4, 3, precondition="v"), 3, sched)
    adapter = LocalScoreSource(init_denoiser(ArchitectureDescriptor(shape, 4, 1, 4, 3, precondition="v"), 4, sched))
    cfg = CompositionConfig(gamma=0.3, alpha=2.0, cutoff_fraction=0.2)
    cond = ConditionSpec(label_id=np.array([0, 1, 2]))
    with ScoreServer({"prior": prior}) as srv:
        host, port = srv.address
        identical = []
        for seed in range(3):
            local = video_adapter_sample(adapter, LocalScoreSource(prior), cfg, sched, (3,) + shape, cond,
                                         KeyedRng(seed))
            with ScoreClient(host, port).connect() as c:
                remote = video_adapter_sample(adapter, RemoteScoreSource(c, "prior"), cfg, sched, (3,) + shape,
                                              cond, KeyedRng(seed))
            identical.append(remote.tobytes() == local.tobytes())

        xs = [np.random.default_rng(i).standard_normal((1 + i % 3,) + shape).astype(np.float32) for i in range(6)]
        expected = {(i, t): predict_eps(prior, NoisySample(x, t), ConditionSpec(label_id=np.arange(len(x)) % 3))
                    .tobytes() for i, x in enumerate(xs) for t in (1, 5, 10)}
        mismatches, failures, served = [], [], []
        stop_fuzz = threading.Event()

        def fuzz():
            g = np.random.default_rng(99)
            while not stop_fuzz.is_set():
                try:
                    with socket.create_connection((host, port), timeout=5) as s:
                        if g.random() < 0.5:
                            s.sendall(g.bytes(int(g.integers(1, 200))))
                        else:
                            body = bytearray(encode_request(ScoreRequest("prior", 2, xs[0], np.array([1]))))
                            body[int(g.integers(len(body)))] ^= 0xFF
                            s.sendall(frame(bytes(body)))
                            s.recv(1 << 16)
                except OSError:
                    pass

        def client(k):
            try:
                g = np.random.default_rng(k)
                with ScoreClient(host, port, timeout=120).connect() as c:
                    for _ in range(100):
                        i, t = int(g.integers(len(xs))), int(g.choice([1, 5, 10]))
                        eps = c.request(ScoreRequest("prior", t, xs[i], np.arange(len(xs[i])) % 3))
                        if eps.tobytes() != expected[i, t]:
                            mismatches.append((k, i, t))
                        served.append(1)
            except Exception as exc:  # counted as a failure below
                failures.append(repr(exc))

        fuzzer = threading.Thread(target=fuzz)
        fuzzer.start()
        workers = [threading.Thread(target=client, args=(k,)) for k in range(32)]
        for w in workers:
            w.start()
        for w in workers:
            w.join()
        stop_fuzz.set()
        fuzzer.join()
        with ScoreClient(host, port).connect() as c:
            alive = c.request(ScoreRequest("prior", 5, xs[0], np.array([0]))).shape == xs[0].shape
    ok = all(identical) and len(served) == 3200 and not mismatches and not failures and alive
    assert verdict(9, ok, f"remote==local bitwise {sum(identical)}/3 seeds, {len(served)} requests, "
                          f"{len(mismatches)} mismatches, {len(failures)} client failures, server alive {alive}")


# ---------------------------------------------------------------- 10

def test_criterion_10_conditioning_builders(verdict):
    ramp = np.tile(np.arange(9.0), (7, 1))[None, :, :, None]
    raw = sobel_edges(ramp, raw=True)
    sobel_ok = bool(np.all(raw[0, 1:-1, 1:-1, 0] == 8.0))
    frame_ = np.random.default_rng(0).standard_normal((6, 5, 3))
    rep = make_first_frame_condition(frame_, 8)
    rep_ok = rep.shape == (8, 6, 5, 3) and all(np.array_equal(rep[h], frame_) for h in range(8))
    assert verdict(10, sobel_ok and rep_ok, f"sobel ramp interior == 8: {sobel_ok}, first-frame slices equal: {rep_ok}")
