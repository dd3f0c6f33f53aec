"""Feature statistics, Frechet distance and the benchmark runner."""

from .benchmark import (COLUMNS, BenchmarkError, BenchmarkReport, BenchmarkRow, finetune_baseline, finetune_budget,
                        make_corpora, render_figures, run_benchmark, weight_sweep, write_report)
from .metrics import FeatureProbe, FeatureStats, extract_features, frechet_distance, stats_from_features

__all__ = [
    "COLUMNS", "BenchmarkError", "BenchmarkReport", "BenchmarkRow", "FeatureProbe", "FeatureStats",
    "extract_features", "finetune_baseline", "finetune_budget", "frechet_distance", "make_corpora",
    "render_figures", "run_benchmark", "stats_from_features", "weight_sweep", "write_report",
]
