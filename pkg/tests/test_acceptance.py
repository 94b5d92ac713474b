"""Acceptance criteria, one test per criterion.

Each test records a one-line verdict in ``RESULTS`` before asserting, so
the terminal summary lists every criterion whether it passed or failed.
Criteria 5 to 7 train many models on the default benchmark and take several
minutes each on one CPU.
"""

import io
import json
import shutil
import time

import numpy as np
import pytest

from mvlstm.archive import ArchiveError, load_classifier, save_classifier
from mvlstm.cells import crosscell_step, init_params, modevar_step, zero_state
from mvlstm.cli import main
from mvlstm.data import (DatasetFormatError, GeneratorConfig, generate_dataset, load_dataset,
                         make_static_sequence, rerender, save_dataset, split_by_mode)
from mvlstm.experiments import BenchmarkConfig, paired_difference, robustness_experiment, summarize
from mvlstm.model import TrainConfig, train
from mvlstm.probe import ProbeError, convergence_report, export_figure, pair_divergence, trace_features
from test_cells import crosscell_reduction_error, modevar_reduction_error, randomize_biases, tie_static_path

RESULTS = {}
SEEDS = range(5)


def record(number, title, passed, detail):
    RESULTS[number] = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    print(RESULTS[number])
    return passed


def run_cli(*argv):
    return main(list(argv), out=io.StringIO())


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_check(tmp_path):
    start = time.perf_counter()
    code = run_cli("gradcheck", "--seeds", "20", "--out", str(tmp_path))
    elapsed = time.perf_counter() - start
    doc = json.loads((tmp_path / "gradcheck.json").read_text())
    worst = max(e for v in doc["variants"].values() for e in v["per_param"].values())
    ok = code == 0 and doc["passed"] and len(doc["variants"]) == 3 and elapsed < 60
    assert record(1, "gradient check, 3 variants x 20 seeds at 1e-5", ok,
                  f"worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2

def test_criterion_2_reductions():
    cc = max(crosscell_reduction_error(seed) for seed in range(100))
    mv = max(modevar_reduction_error(seed) for seed in range(100))
    ok = cc <= 1e-12 and mv <= 1e-12
    assert record(2, "crosscell->modevar and modevar->lstm reductions on 100 instances", ok,
                  f"max errors {cc:.1e}, {mv:.1e}")


# ---------------------------------------------------------------- 3

def tie_cross_terms(p):
    a = dict(p.arrays)
    a["W_chat_i"], a["W_chat_f"] = a["W_ci"].copy(), a["W_cf"].copy()
    return p.replace(a)


def symmetry_error(variant, seed, steps=50):
    rng = np.random.default_rng([seed, 3])
    p = tie_static_path(randomize_biases(init_params(3, 5, variant, seed), seed))
    if variant == "modevar_crosscell":
        p = tie_cross_terms(p)
    step = modevar_step if variant == "modevar" else crosscell_step
    s = zero_state(variant, 5)
    worst = 0.0
    for _ in range(steps):
        x = rng.uniform(-1, 1, 3)
        s, _ = step(p, s, x, x)
        worst = max(worst, np.abs(s.c - s.c_hat).max(), np.abs(s.h - s.h_hat).max())
    return worst


def test_criterion_3_tied_symmetry():
    errs = {v: max(symmetry_error(v, seed) for seed in range(20)) for v in ("modevar", "modevar_crosscell")}
    ok = all(e <= 1e-14 for e in errs.values())
    bitwise = all(e == 0.0 for e in errs.values())
    assert record(3, "tied-weight symmetry c_hat=c, h_hat=h for T=50", ok,
                  f"{'bitwise' if bitwise else 'max diff ' + str(max(errs.values()))}")


# ---------------------------------------------------------------- 4

def test_criterion_4_memorization():
    samples, _ = generate_dataset(GeneratorConfig(num_classes=4, per_cell=5, modes=("identity",)), 0)
    assert len(samples) == 20
    start = time.perf_counter()
    _, history = train(samples, "modevar_crosscell", TrainConfig(epochs=200, seed=0))
    elapsed = time.perf_counter() - start
    first = next((m.epoch for m in history if m.train_accuracy == 1.0), None)
    ok = first is not None and elapsed < 120
    assert record(4, "modevar_crosscell memorizes 20 samples within 200 epochs", ok,
                  f"100% first at epoch {first}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 5

def test_criterion_5_unseen_mode_gap():
    start = time.perf_counter()
    results = robustness_experiment(["lstm", "modevar_crosscell"], SEEDS, BenchmarkConfig())
    elapsed = time.perf_counter() - start
    summary = summarize(results)
    diff, se = paired_difference(results, "lstm", "modevar_crosscell", key="gap")
    g_l, g_c = summary["lstm"]["gap"], summary["modevar_crosscell"]["gap"]
    ok = g_c < g_l and diff > se and elapsed < 15 * 60
    assert record(5, "modevar_crosscell seen->unseen gap below lstm's by more than one SE", ok,
                  f"gap lstm {g_l:.4f}, crosscell {g_c:.4f}, difference {diff:.4f} SE {se:.4f}, "
                  f"{elapsed / 60:.1f} min")


# ---------------------------------------------------------------- 6

@pytest.fixture(scope="module")
def probe_setting():
    samples, manifest = generate_dataset(GeneratorConfig(), 0)
    split = split_by_mode(samples, [0], [1, 2, 3], n_folds=5, fold=0)
    models = {v: train(split.train, v, TrainConfig(seed=0))[0] for v in ("lstm", "modevar_crosscell")}
    return split, manifest, models


def probe_pairs(params, split, manifest, n=30):
    """Convergence fraction and divergences of mode-differing and same-mode pairs."""
    reports = []
    diff, same = [], []
    for s in split.seen_test:
        base = convergence_report(trace_features(params, make_static_sequence(s, 0, n)))
        twin = convergence_report(trace_features(params, make_static_sequence(rerender(s, manifest, replicate=1), 0, n)))
        others = [convergence_report(trace_features(params, make_static_sequence(o, 0, n)))
                  for m in sorted(split.unseen_test) for o in split.unseen_test[m] if o.seed == s.seed]
        reports += [base] + others
        for r in others:
            try:
                diff.append(pair_divergence(base, r))
            except ProbeError:
                pass
        try:
            same.append(pair_divergence(base, twin))
        except ProbeError:
            pass
    frac = float(np.mean([r.converged for r in reports]))
    return frac, diff, same


def test_criterion_6_static_sequence_probe(probe_setting, tmp_path):
    split, manifest, models = probe_setting
    frac, diff_l, same_l = probe_pairs(models["lstm"], split, manifest)
    _, diff_c, _ = probe_pairs(models["modevar_crosscell"], split, manifest)
    mean = (lambda xs: float(np.mean(xs)) if xs else float("nan"))
    base = split.seen_test[0]
    partner = next(o for o in split.unseen_test[1] if o.seed == base.seed)
    traces = [trace_features(models["lstm"], make_static_sequence(x, 0, 30)) for x in (base, partner)]
    paths = export_figure(traces, 15, tmp_path / "probe", labels=["mode 0", "mode 1"])
    rows = (tmp_path / "probe_0.csv").read_text().splitlines()
    artifacts = len(rows) == 16 and all(len(r.split(",")) == 31 for r in rows) and \
        (tmp_path / "probe.svg").exists() and len(paths) == 3
    ok = (frac >= 0.9 and mean(diff_l) > mean(same_l) and mean(diff_c) < mean(diff_l) and artifacts)
    assert record(6, "static-sequence probe: lstm converges, mode pairs diverge, crosscell less so", ok,
                  f"lstm converged fraction {frac:.2f}, divergences lstm diff-mode {mean(diff_l):.4f} "
                  f"same-mode {mean(same_l):.4f}, crosscell diff-mode {mean(diff_c):.4f}, "
                  f"15x30 artifacts {'ok' if artifacts else 'missing'}")


# ---------------------------------------------------------------- 7

def test_criterion_7_random_tau_ordering():
    bench = BenchmarkConfig(training=TrainConfig(tau_policy="random_per_sequence"))
    results = robustness_experiment(["lstm", "modevar", "modevar_crosscell"], SEEDS, bench)
    summary = summarize(results)
    checks = []
    for a, b in (("modevar_crosscell", "modevar"), ("modevar_crosscell", "lstm"), ("modevar", "lstm")):
        d, se = paired_difference(results, a, b, key="unseen")
        checks.append((a, b, d, se, d >= -se))
    ok = all(c[4] for c in checks)
    detail = ", ".join(f"{k} {v['unseen']:.4f}" for k, v in summary.items()) + "; " + \
        ", ".join(f"{a}-{b} {d:+.4f} (SE {se:.4f})" for a, b, d, se, _ in checks)
    assert record(7, "random tau unseen accuracy crosscell >= modevar >= lstm within one SE", ok, detail)


# ---------------------------------------------------------------- 8

def test_criterion_8_reproducibility(tmp_path):
    small = ["--per-cell", "6", "--length", "12", "--input-dim", "5", "--num-classes", "3"]
    outputs = []
    d = tmp_path / "run"
    for _ in range(2):
        # identical config means an identical output directory too; the run
        # manifest records it
        shutil.rmtree(d, ignore_errors=True)
        codes = [
            run_cli("gen-data", "--out", str(d), "--seed", "7", *small),
            run_cli("train", "--out", str(d), "--seed", "7", "--epochs", "3", "--hidden-dim", "16",
                    "--tau", "random"),
            run_cli("eval", "--out", str(d), "--seed", "7"),
            run_cli("probe", "--out", str(d / "probe"), "--model", str(d / "model.mvp"),
                    "--dataset", str(d / "dataset"), "--seed", "7"),
            run_cli("gradcheck", "--out", str(d / "gc"), "--seeds", "2"),
        ]
        assert codes == [0] * 5
        outputs.append({str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    a, b = outputs
    differing = [name for name in a if a[name] != b.get(name)]
    ok = a.keys() == b.keys() and not differing and len(a) >= 10
    assert record(8, "reruns give byte-identical metric and figure files", ok,
                  f"{len(a)} files compared, {len(differing)} differ")


# ---------------------------------------------------------------- 9

def test_criterion_9_serialization(tmp_path):
    samples, manifest = generate_dataset(GeneratorConfig(per_cell=3), 2)
    save_dataset(tmp_path / "ds", samples, manifest)
    loaded, _ = load_dataset(tmp_path / "ds")
    data_exact = all(a.frames.tobytes() == b.frames.tobytes() for a, b in zip(samples, loaded)) \
        and len(loaded) == len(samples)

    params, _ = train(samples[:12], "modevar_crosscell", TrainConfig(epochs=1, hidden_dim=6))
    save_classifier(tmp_path / "m.mvp", params)
    back = load_classifier(tmp_path / "m.mvp")
    params_exact = all(v.tobytes() == back.named()[k].tobytes() for k, v in params.named().items())

    rejected = 0
    for path, error in ((tmp_path / "ds.frames", DatasetFormatError), (tmp_path / "m.mvp", ArchiveError)):
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0x04
        path.write_bytes(bytes(blob))
        try:
            load_dataset(tmp_path / "ds") if error is DatasetFormatError else load_classifier(path)
        except error as exc:
            rejected += bool(str(exc))
    ok = data_exact and params_exact and rejected == 2
    assert record(9, "bit-exact dataset and parameter round trips, corruption rejected", ok,
                  f"dataset exact {data_exact}, params exact {params_exact}, corrupt files rejected {rejected}/2")
