"""Command-line entry point: ``mvlstm {gen-data,train,eval,gradcheck,probe}``.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then command-line flags; later sources win. Exit status is 0
on success, 1 when a check or validation fails and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .archive import ArchiveError, classifier_from_arrays, load_classifier, loads, save_classifier
from .autodiff import grad_check
from .cells import VARIANTS, CellOptions
from .data import (DatasetFormatError, GeneratorConfig, fold_of, generate_dataset, load_dataset,
                   make_static_sequence, parse_modes, rerender, save_dataset, split_by_mode)
from .fileio import atomic_write
from .model import TrainConfig, TrainingDiverged, evaluate, metrics_csv, select_tau, train
from .probe import ProbeError, convergence_report, export_figure, pair_divergence, trace_features

log = logging.getLogger("mvlstm")

DEFAULTS = {
    "seed": 0,
    "variant": "modevar_crosscell",
    "out": "out",
    "dataset": None,              # stem; defaults to <out>/dataset
    # data generation
    "input_dim": 16,
    "length": 24,
    "num_classes": 6,
    "per_cell": 40,
    "noise": 0.05,
    "modes": "identity,additive,gain,linear",
    # training
    "epochs": 50,
    "lr": 1e-4,
    "batch_size": 8,
    "optimizer": "adam",
    "grad_clip": 5.0,
    "hidden_dim": 32,
    "pool": "last",
    "tau": "first",
    "literal_eq2": False,
    "diagonal_peephole": False,
    "untied_crosscell": False,
    "record_time": False,
    # split
    "seen_modes": "0",
    "n_folds": 5,
    "fold": 0,
    # evaluation
    "model": None,                # list of archive paths; defaults to <out>/model.mvp
    "subset": "test",
    # gradient check
    "tolerance": 1e-5,
    "gc_seeds": 20,
    "gc_input_dim": 2,
    "gc_hidden_dim": 3,
    "gc_steps": 4,
    # probe
    "n_static": 30,
    "first_k": 15,
    "epsilon": 1e-4,
    "pair": "same-class-diff-mode",
    "sample": 0,
    "pair_mode": None,            # partner mode for diff-mode pairs; defaults to the first unseen mode
}


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def _tau_value(text):
    text = str(text)
    if text in ("first", "first_frame"):
        return "first_frame"
    if text in ("random", "random_per_sequence"):
        return "random_per_sequence"
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"--tau must be 'first', 'random' or an integer, got {text!r}") from None


def load_config(args):
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(doc)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant {cfg['variant']!r}")
    cfg["tau"] = _tau_value(cfg["tau"])
    if cfg["dataset"] is None:
        cfg["dataset"] = str(Path(cfg["out"]) / "dataset")
    if cfg["model"] is None:
        cfg["model"] = [str(Path(cfg["out"]) / "model.mvp")]
    elif isinstance(cfg["model"], str):
        cfg["model"] = [cfg["model"]]
    return cfg


def _modes_list(cfg):
    try:
        return parse_modes(cfg["modes"]) if isinstance(cfg["modes"], str) else tuple(cfg["modes"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _seen_modes(cfg):
    raw = cfg["seen_modes"]
    try:
        return tuple(int(m) for m in (raw.split(",") if isinstance(raw, str) else raw))
    except ValueError:
        raise UsageError(f"bad seen_modes {raw!r}") from None


def generator_config(cfg):
    return GeneratorConfig(input_dim=cfg["input_dim"], length=cfg["length"], num_classes=cfg["num_classes"],
                           noise=cfg["noise"], per_cell=cfg["per_cell"], modes=_modes_list(cfg))


def train_config(cfg):
    return TrainConfig(learning_rate=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       optimizer=cfg["optimizer"], seed=cfg["seed"], grad_clip=cfg["grad_clip"],
                       tau_policy=cfg["tau"], hidden_dim=cfg["hidden_dim"], pool=cfg["pool"])


def cell_options(cfg):
    return CellOptions(literal_eq2=cfg["literal_eq2"], diagonal_peephole=cfg["diagonal_peephole"],
                       untied_crosscell=cfg["untied_crosscell"])


def _write_json(path, doc):
    atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_dataset(cfg):
    try:
        return load_dataset(cfg["dataset"])
    except FileNotFoundError as exc:
        raise CheckFailed(f"dataset not found: {exc.filename}") from None
    except DatasetFormatError as exc:
        raise CheckFailed(f"dataset rejected: {exc}") from None


def _split(samples, manifest, seen, n_folds, fold):
    unseen = [m.mode_id for m in manifest.modes if m.mode_id not in seen]
    if not unseen:
        raise UsageError("every mode is seen; nothing left to test on")
    try:
        return split_by_mode(samples, seen, unseen, n_folds, fold)
    except ValueError as exc:
        raise CheckFailed(str(exc)) from None


def cmd_gen_data(cfg, out=sys.stdout):
    gen = generator_config(cfg)
    try:
        samples, manifest = generate_dataset(gen, cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    Path(cfg["dataset"]).parent.mkdir(parents=True, exist_ok=True)
    mpath, fpath = save_dataset(cfg["dataset"], samples, manifest)
    print(f"wrote {len(samples)} samples to {fpath} (manifest {mpath})", file=out)
    print("mode,kind,name," + ",".join(f"class_{c}" for c in range(gen.num_classes)), file=out)
    for m in manifest.modes:
        counts = [manifest.counts.get((c, m.mode_id), 0) for c in range(gen.num_classes)]
        print(f"{m.mode_id},{m.kind},{m.name}," + ",".join(map(str, counts)), file=out)
    return 0


def cmd_train(cfg, out=sys.stdout):
    samples, manifest = _load_dataset(cfg)
    seen = _seen_modes(cfg)
    split = _split(samples, manifest, seen, cfg["n_folds"], cfg["fold"])
    tcfg = train_config(cfg)
    try:
        tcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        params, history = train(split.train, cfg["variant"], tcfg, cell_options(cfg))
    except TrainingDiverged as exc:
        raise CheckFailed(f"training aborted: {exc}") from None
    split_meta = {"seen_modes": list(seen), "n_folds": cfg["n_folds"], "fold": cfg["fold"],
                  "dataset_checksum": manifest.checksum}
    save_classifier(outdir / "model.mvp", params, {"split": split_meta})
    atomic_write(outdir / "metrics.csv", metrics_csv(history))
    files = {"model": "model.mvp", "metrics": "metrics.csv", "run_manifest": "run_manifest.json"}
    if cfg["record_time"]:
        lines = ["epoch,wall_time_ms"] + [f"{m.epoch},{m.wall_time_ms:.3f}" for m in history]
        atomic_write(outdir / "timing.csv", "\n".join(lines) + "\n")
        files["timing"] = "timing.csv"
    snapshot = {k: v for k, v in cfg.items() if k not in ("model",)}
    _write_json(outdir / "run_manifest.json", {
        "command": "train", "version": __version__, "seed": cfg["seed"], "config": snapshot,
        "train_samples": len(split.train), "files": files,
    })
    last = history[-1]
    print(f"{cfg['variant']}: {len(split.train)} training samples, {tcfg.epochs} epochs, "
          f"final loss {last.mean_loss:.6f}, final train accuracy {last.train_accuracy:.4f}", file=out)
    return 0


def _eval_sets(samples, manifest, params_meta_split, cfg):
    seen = tuple(params_meta_split.get("seen_modes", _seen_modes(cfg)))
    n_folds = params_meta_split.get("n_folds", cfg["n_folds"])
    fold = params_meta_split.get("fold", cfg["fold"])
    if cfg["subset"] == "test":
        split = _split(samples, manifest, seen, n_folds, fold)
        sets = {}
        for m in manifest.modes:
            mid = m.mode_id
            sets[mid] = [s for s in split.seen_test if s.mode_id == mid] if mid in seen else split.unseen_test[mid]
    elif cfg["subset"] == "train":
        folds = fold_of(samples, n_folds)
        sets = {m.mode_id: [s for s in samples if s.mode_id == m.mode_id and folds[s.seed] != fold]
                for m in manifest.modes}
    elif cfg["subset"] == "all":
        sets = {m.mode_id: [s for s in samples if s.mode_id == m.mode_id] for m in manifest.modes}
    else:
        raise UsageError(f"unknown subset {cfg['subset']!r}")
    return seen, sets


def cmd_eval(cfg, out=sys.stdout):
    samples, manifest = _load_dataset(cfg)
    models = []
    for path in cfg["model"]:
        try:
            arrays, meta = loads(Path(path).read_bytes())
            models.append((path, classifier_from_arrays(arrays, meta), meta.get("split", {})))
        except FileNotFoundError:
            raise CheckFailed(f"model archive not found: {path}") from None
        except ArchiveError as exc:
            raise CheckFailed(f"{path}: {exc}") from None
    for path, params, _ in models:
        if params.cell.input_dim != manifest.config.input_dim:
            raise CheckFailed(f"{path}: input_dim {params.cell.input_dim} does not match dataset "
                              f"({manifest.config.input_dim})")
    seen, sets = _eval_sets(samples, manifest, models[0][2], cfg)
    names = {m.mode_id: m.name or m.kind for m in manifest.modes}
    header = ["mode", "name", "role", "n"] + [f"rate_{params.variant}_{i}" for i, (_, params, _) in enumerate(models)]
    rows, summary = [], []
    for _, params, _ in models:
        rates = {m: (evaluate(params, s).rate if s else float("nan")) for m, s in sets.items()}
        summary.append(rates)
    for m, s in sets.items():
        role = "seen" if m in seen else "unseen"
        rows.append([str(m), names[m], role, str(len(s))] + [f"{r[m]:.4f}" for r in summary])
    gaps = []
    for (path, params, _), rates in zip(models, summary):
        seen_r = [rates[m] for m in sets if m in seen and sets[m]]
        unseen_r = [rates[m] for m in sets if m not in seen and sets[m]]
        everything = [s for v in sets.values() for s in v]
        overall = evaluate(params, everything).rate
        gap = float(np.mean(seen_r) - np.mean(unseen_r)) if seen_r and unseen_r else float("nan")
        gaps.append((params.variant, overall, gap))
    csv_lines = [",".join(header)] + [",".join(r) for r in rows]
    csv_lines.append(",".join(["overall", "", "", str(sum(len(v) for v in sets.values()))]
                              + [f"{g[1]:.4f}" for g in gaps]))
    csv_lines.append(",".join(["gap", "", "seen-unseen", ""] + [f"{g[2]:.4f}" for g in gaps]))
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    atomic_write(outdir / "eval.csv", "\n".join(csv_lines) + "\n")

    width = max(len(n) for n in names.values())
    print(f"{'mode':>4}  {'name':<{width}}  {'role':<6}  {'n':>5}  " +
          "  ".join(f"{p.variant:>18}" for _, p, _ in models), file=out)
    for r in rows:
        print(f"{r[0]:>4}  {r[1]:<{width}}  {r[2]:<6}  {r[3]:>5}  " + "  ".join(f"{v:>18}" for v in r[4:]), file=out)
    print(f"{'':>4}  {'overall':<{width}}  {'':<6}  {'':>5}  " + "  ".join(f"{g[1]:>18.4f}" for g in gaps), file=out)
    print(f"{'':>4}  {'gap':<{width}}  {'':<6}  {'':>5}  " + "  ".join(f"{g[2]:>18.4f}" for g in gaps), file=out)
    if len(gaps) == 2:
        (va, _, ga), (vb, _, gb) = gaps
        smaller = va if ga < gb else vb if gb < ga else "neither"
        print(f"gap comparison: {va} {ga:.4f} vs {vb} {gb:.4f}; smaller gap: {smaller}", file=out)
    return 0


def cmd_gradcheck(cfg, out=sys.stdout):
    tol = float(cfg["tolerance"])
    if tol <= 0:
        raise UsageError("tolerance must be positive")
    variants = (cfg["variant"],) if cfg.get("_variant_explicit") else VARIANTS
    opts = cell_options(cfg)
    doc = {"tolerance": tol, "seeds": cfg["gc_seeds"], "variants": {}}
    worst_overall = None
    all_ok = True
    for variant in variants:
        per_param = {}
        ok = True
        for seed in range(cfg["gc_seeds"]):
            rep = grad_check(variant, cfg["gc_input_dim"], cfg["gc_hidden_dim"], cfg["gc_steps"], seed, tol,
                             options=opts)
            for name, err in rep.per_param.items():
                if err >= per_param.get(name, (-1.0, 0))[0]:
                    per_param[name] = (err, seed)
            ok = ok and rep.passed
        all_ok = all_ok and ok
        print(f"[{variant}] {cfg['gc_seeds']} seeds, tolerance {tol:g}: {'PASS' if ok else 'FAIL'}", file=out)
        print(f"  {'parameter':<14} {'max rel err':>12} {'seed':>5}  status", file=out)
        for name, (err, seed) in per_param.items():
            print(f"  {name:<14} {err:12.3e} {seed:>5}  {'pass' if err <= tol else 'FAIL'}", file=out)
        doc["variants"][variant] = {"passed": ok, "per_param": {k: v[0] for k, v in per_param.items()}}
        name, (err, seed) = max(per_param.items(), key=lambda kv: kv[1][0])
        if worst_overall is None or err > worst_overall[2]:
            worst_overall = (variant, name, err, seed)
    doc["passed"] = all_ok
    if cfg.get("_out_explicit"):
        outdir = Path(cfg["out"])
        outdir.mkdir(parents=True, exist_ok=True)
        _write_json(outdir / "gradcheck.json", doc)
    if not all_ok:
        v, n, e, s = worst_overall
        print(f"gradient check FAILED: worst parameter {n} of {v} (seed {s}), relative error {e:.3e} > {tol:g}",
              file=out)
        return 1
    print("gradient check passed", file=out)
    return 0


def _probe_pair(cfg, samples, manifest, params):
    idx = cfg["sample"]
    if not 0 <= idx < len(samples):
        raise CheckFailed(f"sample selector {idx} resolves to nothing ({len(samples)} samples)")
    base = samples[idx]
    pair = cfg["pair"]
    if pair in ("none", "single"):
        return [("sample", base)]
    if pair == "same-class-diff-mode":
        partner_mode = cfg["pair_mode"]
        if partner_mode is None:
            others = [m.mode_id for m in manifest.modes if m.mode_id != base.mode_id]
            if not others:
                raise CheckFailed("dataset has a single mode; no mode-differing partner exists")
            partner_mode = others[0]
        matches = [s for s in samples if s.seed == base.seed and s.mode_id == partner_mode]
        if not matches:
            raise CheckFailed(f"no sample of subject {base.seed} in mode {partner_mode}")
        return [(f"mode {base.mode_id}", base), (f"mode {partner_mode}", matches[0])]
    if pair == "same-mode":
        twin = rerender(base, manifest, replicate=1)
        return [(f"mode {base.mode_id}", base), (f"mode {base.mode_id} (noise replicate)", twin)]
    raise UsageError(f"unknown pair selector {pair!r}")


def cmd_probe(cfg, out=sys.stdout):
    samples, manifest = _load_dataset(cfg)
    path = cfg["model"][0]
    try:
        params = load_classifier(path)
    except FileNotFoundError:
        raise CheckFailed(f"model archive not found: {path}") from None
    except ArchiveError as exc:
        raise CheckFailed(f"{path}: {exc}") from None
    chosen = _probe_pair(cfg, samples, manifest, params)
    if not 1 <= cfg["first_k"] <= params.cell.hidden_dim:
        raise UsageError(f"--first-k must lie in 1..{params.cell.hidden_dim}")
    traces, reports, labels = [], [], []
    entries = []
    for label, s in chosen:
        tau = select_tau(s, cfg["tau"], cfg["seed"])
        seq = make_static_sequence(s, tau, cfg["n_static"])
        tr = trace_features(params, seq, sample_id=s.index, tau=tau)
        rep = convergence_report(tr, cfg["epsilon"])
        traces.append(tr)
        reports.append(rep)
        labels.append(f"{label}, tau={tau}")
        entries.append({"label": label, "sample": s.index, "subject_seed": s.seed, "class": s.label,
                        "mode": s.mode_id, "tau": tau, "convergence_time": rep.convergence_time})
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    written = export_figure(traces, cfg["first_k"], outdir / "probe", labels,
                            title=f"{params.variant}: static sequences, N={cfg['n_static']}")
    doc = {"variant": params.variant, "n_static": cfg["n_static"], "first_k": cfg["first_k"],
           "epsilon": cfg["epsilon"], "traces": entries, "files": [Path(w).name for w in written]}
    for e in entries:
        print(f"{e['label']}: sample {e['sample']} class {e['class']} tau {e['tau']} "
              f"convergence_time {e['convergence_time']}", file=out)
    if len(reports) == 2:
        try:
            div = pair_divergence(*reports)
            doc["divergence"] = div
            print(f"divergence {div!r}", file=out)
        except ProbeError as exc:
            doc["divergence"] = None
            print(f"divergence unavailable: {exc}", file=out)
    _write_json(outdir / "probe_report.json", doc)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mvlstm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with settings")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--dataset", help="dataset stem (without .manifest/.frames)")

    g = sub.add_parser("gen-data", help="generate a synthetic mode-variation dataset")
    common(g)
    g.add_argument("--modes", help="e.g. 'identity,additive,gain,linear' or 'additive:3'")
    g.add_argument("--per-cell", dest="per_cell", type=int)
    g.add_argument("--num-classes", dest="num_classes", type=int)
    g.add_argument("--length", type=int)
    g.add_argument("--input-dim", dest="input_dim", type=int)
    g.add_argument("--noise", type=float)

    def training_flags(sp):
        sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--optimizer", choices=("adam", "sgd_momentum"))
        sp.add_argument("--hidden-dim", dest="hidden_dim", type=int)
        sp.add_argument("--tau", help="first, random or an integer frame index")
        sp.add_argument("--seen-modes", dest="seen_modes")
        sp.add_argument("--folds", dest="n_folds", type=int)
        sp.add_argument("--fold", type=int)
        sp.add_argument("--literal-eq2", dest="literal_eq2", action="store_const", const=True)
        sp.add_argument("--diagonal-peephole", dest="diagonal_peephole", action="store_const", const=True)
        sp.add_argument("--untied-crosscell", dest="untied_crosscell", action="store_const", const=True)

    t = sub.add_parser("train", help="train a classifier on the seen-mode split")
    common(t)
    training_flags(t)
    t.add_argument("--pool", choices=("last", "mean"))
    t.add_argument("--grad-clip", dest="grad_clip", type=float)
    t.add_argument("--record-time", dest="record_time", action="store_const", const=True,
                   help="also write per-epoch wall time to timing.csv")

    e = sub.add_parser("eval", help="per-mode recognition rates of one or two models")
    common(e)
    e.add_argument("--model", action="append", help="model archive (repeat to compare two)")
    e.add_argument("--subset", choices=("test", "train", "all"))
    e.add_argument("--seen-modes", dest="seen_modes")
    e.add_argument("--folds", dest="n_folds", type=int)
    e.add_argument("--fold", type=int)

    c = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients for every variant")
    c.add_argument("--config")
    c.add_argument("--out")
    c.add_argument("--variant", choices=VARIANTS, help="check one variant only")
    c.add_argument("--tolerance", type=float)
    c.add_argument("--seeds", dest="gc_seeds", type=int)
    c.add_argument("--literal-eq2", dest="literal_eq2", action="store_const", const=True)
    c.add_argument("--diagonal-peephole", dest="diagonal_peephole", action="store_const", const=True)
    c.add_argument("--untied-crosscell", dest="untied_crosscell", action="store_const", const=True)

    pr = sub.add_parser("probe", help="static-sequence feature traces (warm-up and pair divergence)")
    common(pr)
    pr.add_argument("--model", action="append")
    pr.add_argument("--pair", choices=("same-class-diff-mode", "same-mode", "none"))
    pr.add_argument("--pair-mode", dest="pair_mode", type=int)
    pr.add_argument("--sample", type=int)
    pr.add_argument("--n", "--n-static", dest="n_static", type=int)
    pr.add_argument("--tau")
    pr.add_argument("--first-k", dest="first_k", type=int)
    pr.add_argument("--epsilon", type=float)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "probe": cmd_probe}


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        cfg["_variant_explicit"] = getattr(args, "variant", None) is not None
        cfg["_out_explicit"] = getattr(args, "out", None) is not None
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"mvlstm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except CheckFailed as exc:
        print(f"mvlstm {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mvlstm {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
