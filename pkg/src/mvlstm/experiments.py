"""Seen/unseen-mode robustness experiments over several seeds.

Each run generates a dataset from its seed, trains on the seen modes of one
fold and reports recognition rates on the held-out subjects of every mode.
Runs are independent, so they may be spread over worker processes
(``MVLSTM_WORKERS``); results always come back in (variant, seed) order.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cells import CellOptions
from .data import GeneratorConfig, generate_dataset, split_by_mode
from .model import TrainConfig, evaluate, train

WORKERS_ENV = "MVLSTM_WORKERS"


def workers_from_env(default=1):
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, default)))
    except ValueError:
        return default


@dataclass
class RunResult:
    variant: str
    seed: int
    seen_rate: float
    unseen_rates: dict = field(default_factory=dict)
    train_accuracy: float = 0.0

    @property
    def unseen_mean(self):
        return float(np.mean(list(self.unseen_rates.values())))

    @property
    def gap(self):
        return self.seen_rate - self.unseen_mean


@dataclass
class BenchmarkConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    seen_modes: tuple = (0,)
    n_folds: int = 5
    fold: int = 0
    options: CellOptions = field(default_factory=CellOptions)


def run_one(variant, seed, bench):
    samples, manifest = generate_dataset(bench.generator, seed)
    mode_ids = [m.mode_id for m in manifest.modes]
    unseen = [m for m in mode_ids if m not in bench.seen_modes]
    split = split_by_mode(samples, bench.seen_modes, unseen, bench.n_folds, bench.fold)
    cfg = replace(bench.training, seed=seed)
    params, history = train(split.train, variant, cfg, bench.options)
    rates = {m: evaluate(params, split.unseen_test[m]).rate for m in unseen if split.unseen_test[m]}
    return RunResult(variant, seed, evaluate(params, split.seen_test).rate, rates,
                     history[-1].train_accuracy)


def _run_job(job):
    return run_one(*job)


def robustness_experiment(variants, seeds, bench=None, workers=None):
    bench = bench or BenchmarkConfig()
    jobs = [(v, s, bench) for v in variants for s in seeds]
    workers = workers or workers_from_env()
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def summarize(results):
    """Per variant: mean and standard error of the gap and of unseen accuracy."""
    out = {}
    for variant in dict.fromkeys(r.variant for r in results):
        rs = [r for r in results if r.variant == variant]
        gaps = np.array([r.gap for r in rs])
        unseen = np.array([r.unseen_mean for r in rs])
        seen = np.array([r.seen_rate for r in rs])
        n = len(rs)
        se = (lambda a: float(a.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0)
        out[variant] = {"n": n, "seen": float(seen.mean()), "unseen": float(unseen.mean()),
                        "unseen_se": se(unseen), "gap": float(gaps.mean()), "gap_se": se(gaps)}
    return out


def paired_difference(results, a, b, key="gap"):
    """Mean and standard error over seeds of ``key(a) - key(b)``, paired by seed."""
    get = (lambda r: r.gap) if key == "gap" else (lambda r: r.unseen_mean)
    ra = {r.seed: get(r) for r in results if r.variant == a}
    rb = {r.seed: get(r) for r in results if r.variant == b}
    seeds = sorted(set(ra) & set(rb))
    d = np.array([ra[s] - rb[s] for s in seeds])
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0
    return float(d.mean()), se
