"""Benchmark runner: adapter-only, prior-only, composed, CFG-Mix and compute-matched finetune rows.

Every row is sampled from the same per-seed random streams and label draws and scored by the
Frechet distance of probe features against the held-out adaptation clips. Rows are keyed by
``(config, seed)``, so report assembly does not depend on execution order.

Table columns (tab-separated, in this order)::

    config  seed  frechet  params  adapted_params  train_s  sample_s

``params`` counts every parameter used at sampling time, ``adapted_params`` the ones trained on
the adaptation corpus. ``train_s`` and ``sample_s`` are wall-clock seconds.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..adapter import CompositionConfig, LocalScoreSource, cfg_mix_sample, cfg_sample, video_adapter_sample
from ..config import BENCHMARK_ROWS, RunConfig, serialize
from ..core_math import KeyedRng, NoiseSchedule
from ..denoiser import (ConditionSpec, DenoiserCheckpoint, TrainConfig, init_denoiser, load_checkpoint,
                        param_count, train_denoiser)
from ..worlds import DYNAMICS, DatasetFile, split_corpora
from .metrics import FeatureProbe, extract_features, frechet_distance

log = logging.getLogger(__name__)

COLUMNS = ("config", "seed", "frechet", "params", "adapted_params", "train_s", "sample_s")


class BenchmarkError(RuntimeError):
    pass


@dataclass
class BenchmarkRow:
    config: str
    seed: int
    frechet: float
    params: int
    adapted_params: int
    train_s: float
    sample_s: float

    def values(self) -> tuple:
        return (self.config, self.seed, self.frechet, self.params, self.adapted_params, self.train_s, self.sample_s)


@dataclass
class BenchmarkReport:
    rows: dict = field(default_factory=dict)  # (config, seed) -> BenchmarkRow
    seeds: tuple = ()
    config: dict = field(default_factory=dict)
    config_text: str = ""
    probe: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def add(self, row: BenchmarkRow) -> None:
        key = (row.config, row.seed)
        if key in self.rows:
            raise BenchmarkError(f"duplicate row {key}")
        if not np.isfinite(row.frechet):
            raise BenchmarkError(f"non-finite Frechet distance for {key}")
        self.rows[key] = row

    def frechet(self, config: str, seed: int) -> float:
        return self.rows[(config, seed)].frechet

    def ordered(self) -> list:
        order = {name: i for i, name in enumerate(BENCHMARK_ROWS)}
        return sorted(self.rows.values(), key=lambda r: (r.seed, order.get(r.config, len(order)), r.config))

    def to_tsv(self) -> str:
        lines = ["\t".join(COLUMNS)]
        for r in self.ordered():
            lines.append("\t".join([r.config, str(r.seed), f"{r.frechet:.6f}", str(r.params),
                                    str(r.adapted_params), f"{r.train_s:.2f}", f"{r.sample_s:.2f}"]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"columns": list(COLUMNS), "rows": [list(r.values()) for r in self.ordered()],
                           "seeds": list(self.seeds), "config": self.config, "probe": self.probe,
                           "extras": self.extras}, indent=2, sort_keys=True)

    def wins(self, better: str, worse: Sequence[str]) -> int:
        """Seeds in which ``better`` is strictly below every config in ``worse``."""
        return sum(all(self.frechet(better, s) < self.frechet(w, s) for w in worse) for s in self.seeds)

    def at_least(self, worse: str, better: str) -> int:
        """Seeds in which ``worse``'s Frechet distance is >= ``better``'s."""
        return sum(self.frechet(worse, s) >= self.frechet(better, s) for s in self.seeds)


def finetune_budget(adapter_steps: int, adapter_params: int, pretrained_params: int) -> int:
    """Compute-matched step budget, using the parameter-count ratio as the FLOP proxy."""
    return max(1, int(round(adapter_steps * adapter_params / pretrained_params)))


def finetune_baseline(pretrained: DenoiserCheckpoint, adapt_corpus, budget: int, sched: NoiseSchedule,
                      base: Optional[TrainConfig] = None):
    """Continue training the prior on the adaptation corpus for ``budget`` updates."""
    if budget < 1:
        raise ValueError("finetune budget must be >= 1")
    base = base or TrainConfig()
    cfg = TrainConfig(budget, base.batch_size, base.lr, base.cond_dropout, base.seed, base.optimizer,
                      base.grad_clip, base.warmup_steps)
    return train_denoiser(pretrained, adapt_corpus, cfg, sched)


def _seed_of(rng: KeyedRng, *key) -> int:
    return rng.child(*key).seed % (2**31)


@dataclass
class _Trained:
    ckpt: DenoiserCheckpoint
    seconds: float


def _train(cfg: RunConfig, which: str, data: DatasetFile, sched: NoiseSchedule, rng: KeyedRng) -> _Trained:
    section = getattr(cfg, f"{which}_model")
    if section.checkpoint:
        ckpt = load_checkpoint(section.checkpoint)
        if ckpt.sched.summary() != sched.summary():
            raise BenchmarkError(f"{which} checkpoint was trained with a different schedule")
        return _Trained(ckpt, 0.0)
    desc = cfg.descriptor(which, data.videos.shape[1:], len(DYNAMICS))
    t0 = time.perf_counter()
    init = init_denoiser(desc, _seed_of(rng, which, "init"), sched)
    ckpt, _ = train_denoiser(init, data, cfg.train_config(which, _seed_of(rng, which, "train")), sched)
    return _Trained(ckpt, time.perf_counter() - t0)


def make_corpora(cfg: RunConfig):
    return split_corpora(cfg.video_spec("broad"), cfg.video_spec("adapt"), cfg.benchmark.test_fraction)


def run_benchmark(cfg: RunConfig, corpora=None, seeds: Optional[Sequence[int]] = None,
                  rows: Optional[Sequence[str]] = None) -> BenchmarkReport:
    """Train (or load) the models for every seed, sample each configured row, score it."""
    bench = cfg.benchmark
    seeds = tuple(bench.seeds if seeds is None else seeds)
    rows = tuple(bench.rows if rows is None else rows)
    unknown = set(rows) - set(BENCHMARK_ROWS)
    if unknown:
        raise BenchmarkError(f"unknown benchmark rows {sorted(unknown)}")
    if not seeds:
        raise BenchmarkError("no seeds given")
    pretrain, adapt_train, adapt_test = make_corpora(cfg) if corpora is None else corpora
    for name, ds in (("pretrain", pretrain), ("adapt train", adapt_train), ("adapt test", adapt_test)):
        if ds is None or len(ds) == 0:
            raise BenchmarkError(f"missing {name} corpus")
    sched = cfg.schedule_obj()
    comp = cfg.composition_config()
    probe = FeatureProbe(channels=adapt_test.videos.shape[-1], n_filters=bench.probe_filters, seed=bench.probe_seed)
    ref = extract_features(adapt_test.videos, probe)
    report = BenchmarkReport(seeds=seeds, config=cfg.to_dict(), config_text=serialize(cfg), probe=probe.config())
    shared = None
    for seed in seeds:
        rng = KeyedRng(seed)
        if bench.share_pretrained:
            if shared is None:
                shared = _train(cfg, "pretrained", pretrain, sched, KeyedRng(cfg.run.seed))
            pre = shared
        else:
            pre = _train(cfg, "pretrained", pretrain, sched, rng)
        ada = _train(cfg, "adapter", adapt_train, sched, rng) if _needs_adapter(rows) else None
        n = bench.n_samples
        shape = (n,) + adapt_test.videos.shape[1:]
        labels = rng.generator("labels").choice(adapt_test.labels, size=n)
        cond = ConditionSpec(label_id=labels)
        sample_rng = rng.child("sample")
        clip = (-1.0, 1.0) if cfg.composition.clip_denoised else None
        P = LocalScoreSource(pre.ckpt)
        A = LocalScoreSource(ada.ckpt) if ada is not None else None
        p_params = param_count(pre.ckpt.descriptor)
        a_params = param_count(ada.ckpt.descriptor) if ada is not None else 0

        def score(name, fn, params, adapted, train_s):
            t0 = time.perf_counter()
            x = fn()
            sample_s = time.perf_counter() - t0
            if not np.all(np.isfinite(x)):
                raise BenchmarkError(f"non-finite samples in row {name!r} seed {seed}")
            fd = frechet_distance(extract_features(np.clip(x, -1.0, 1.0), probe), ref)
            report.add(BenchmarkRow(name, seed, fd, params, adapted, train_s, sample_s))
            log.info("seed %d %-14s frechet %.4f (%.1fs)", seed, name, fd, sample_s)

        for name in rows:
            if name == "adapter":
                score(name, lambda: cfg_sample(A, comp.alpha, sched, shape, cond, sample_rng, x0_range=clip),
                      a_params, a_params, ada.seconds)
            elif name == "pretrained":
                score(name, lambda: cfg_sample(P, comp.alpha, sched, shape, cond, sample_rng, x0_range=clip),
                      p_params, 0, pre.seconds)
            elif name == "video_adapter":
                score(name, lambda: video_adapter_sample(A, P, comp, sched, shape, cond, sample_rng,
                                                            x0_range=clip),
                      a_params + p_params, a_params, ada.seconds)
            elif name == "cfg_mix":
                score(name, lambda: cfg_mix_sample(A, P, comp.alpha, bench.cfg_mix_weight, sched, shape, cond,
                                                   sample_rng, comp.cutoff_fraction, x0_range=clip),
                      a_params + p_params, a_params, ada.seconds)
            elif name == "finetune":
                budget = finetune_budget(cfg.adapter_train.steps, param_count(cfg.descriptor(
                    "adapter", shape[1:], len(DYNAMICS))), p_params)
                t0 = time.perf_counter()
                base = cfg.train_config("pretrained", _seed_of(rng, "finetune", "train"))
                ft, _ = finetune_baseline(pre.ckpt, adapt_train, budget, sched, base)
                train_s = time.perf_counter() - t0
                report.extras.setdefault("finetune_budget", budget)
                F = LocalScoreSource(ft)
                score(name, lambda: cfg_sample(F, comp.alpha, sched, shape, cond, sample_rng, x0_range=clip),
                      p_params, p_params, train_s)
    return report


def _needs_adapter(rows) -> bool:
    return any(r in rows for r in ("adapter", "video_adapter", "cfg_mix"))


def weight_sweep(adapter: DenoiserCheckpoint, pretrained: DenoiserCheckpoint, adapt_test: DatasetFile,
                 sched: NoiseSchedule, comp: CompositionConfig, gammas: Sequence[float],
                 mix_weights: Sequence[float], n: int, seed: int, probe: FeatureProbe) -> dict:
    """Frechet distance as a function of the prior strength (composed) and the mixing weight (CFG-Mix)."""
    rng = KeyedRng(seed)
    ref = extract_features(adapt_test.videos, probe)
    labels = rng.generator("labels").choice(adapt_test.labels, size=n)
    cond = ConditionSpec(label_id=labels)
    shape = (n,) + adapt_test.videos.shape[1:]
    A, P = LocalScoreSource(adapter), LocalScoreSource(pretrained)
    srng = rng.child("sample")

    def fd(x):
        return frechet_distance(extract_features(np.clip(x, -1, 1), probe), ref)

    out = {"gamma": [], "composed": [], "mix_weight": [], "cfg_mix": []}
    for g in gammas:
        c = CompositionConfig(g, comp.alpha, comp.cutoff_fraction, comp.mcmc_steps, comp.mcmc_step_size)
        out["gamma"].append(float(g))
        out["composed"].append(fd(video_adapter_sample(A, P, c, sched, shape, cond, srng)))
    for w in mix_weights:
        out["mix_weight"].append(float(w))
        out["cfg_mix"].append(fd(cfg_mix_sample(A, P, comp.alpha, w, sched, shape, cond, srng, comp.cutoff_fraction)))
    return out


def write_report(report: BenchmarkReport, outdir) -> dict:
    """Write the table, the JSON echo and the figures; returns ``{artifact: path}``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"table": outdir / "report.tsv", "json": outdir / "report.json", "config": outdir / "config.echo"}
    paths["table"].write_text(report.to_tsv())
    paths["json"].write_text(report.to_json())
    paths["config"].write_text(report.config_text)
    paths.update(render_figures(report, outdir))
    return {k: str(v) for k, v in paths.items()}


def render_figures(report: BenchmarkReport, outdir) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    names = [n for n in BENCHMARK_ROWS if any(k[0] == n for k in report.rows)]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    width = 0.8 / max(1, len(report.seeds))
    for i, seed in enumerate(report.seeds):
        vals = [report.rows[(n, seed)].frechet if (n, seed) in report.rows else np.nan for n in names]
        ax.bar(np.arange(len(names)) + i * width, vals, width, label=f"seed {seed}")
    ax.set_xticks(np.arange(len(names)) + width * (len(report.seeds) - 1) / 2)
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel("Frechet distance (lower is better)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    paths = {"bar_figure": outdir / "frechet_rows.png"}
    fig.savefig(paths["bar_figure"], dpi=120)
    plt.close(fig)
    sweep = report.extras.get("sweep")
    if sweep:
        fig, axes = plt.subplots(1, 2, figsize=(7, 3))
        axes[0].plot(sweep["gamma"], sweep["composed"], "o-")
        axes[0].set_xlabel("prior strength gamma")
        axes[0].set_ylabel("Frechet distance")
        axes[1].plot(sweep["mix_weight"], sweep["cfg_mix"], "s-", color="tab:red")
        axes[1].set_xlabel("CFG-Mix weight")
        fig.tight_layout()
        paths["sweep_figure"] = outdir / "weight_sweep.png"
        fig.savefig(paths["sweep_figure"], dpi=120)
        plt.close(fig)
    return paths
