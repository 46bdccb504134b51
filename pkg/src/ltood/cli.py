"""Command-line front end: gen-data, train, eval, ablation, benchmark.

Exit status: 0 on success, 1 for configuration or input errors, 2 when a
run fails.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import config as cfgmod
from .dataset import powerlaw_counts, write_csv
from .diffcore import load_checkpoint
from .errors import ConfigError, LoadError, LtoodError, ParseError, SplitError
from .oodeval import (density_csv, density_export, density_text, evaluate, format_table,
                      predictions_csv, EvalReport)
from .trainer import train

log = logging.getLogger("ltood")

ABLATION_ROWS = [
    ("Baseline", {}),
    ("Standard Mixup", {"mixup_strategy": "standard"}),
    ("H-H Intrasubset (MX1)", {"mixup_strategy": "mx1"}),
    ("M-M Intrasubset (MX2)", {"mixup_strategy": "mx2"}),
    ("T-T Intrasubset (MX3)", {"mixup_strategy": "mx3"}),
    ("H-M Intersubset (MX4)", {"mixup_strategy": "mx4"}),
    ("M-T Intersubset (MX5)", {"mixup_strategy": "mx5"}),
    ("H-T Intersubset (MX6)", {"mixup_strategy": "mx6"}),
]
ABLATION_HEADER = ["Mixup Strategy", "Head", "Middle", "Tail", "Total", "OOD (AUROC%)"]

BENCHMARK_ROWS = [
    ("Baseline", {}),
    ("Mixup", {"mixup_strategy": "standard"}),
    ("Prototype", {"head_type": "prototype"}),
    ("M-T Mixup", {"mixup_strategy": "mx5"}),
    ("M-T Mixup + Prototype", {"head_type": "prototype", "mixup_strategy": "mx5"}),
]
# sweep rows only vary these; everything else comes from the config's method section
SWEEP_DEFAULTS = {"head_type": "softmax", "mixup_strategy": "none"}

CONFIG_ERRORS = (ConfigError, ParseError, LoadError, SplitError)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _setup_logging(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "log.txt")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers = [h for h in root.handlers if not isinstance(h, logging.FileHandler)]
    root.addHandler(handler)
    root.setLevel(logging.INFO)


def _slug(label: str) -> str:
    keep = [c.lower() if c.isalnum() else "-" for c in label]
    return "-".join(filter(None, "".join(keep).split("-")))


def run_name(exp: cfgmod.ExperimentConfig, label: str, seed: int) -> str:
    m = exp.with_method(seed=seed).method
    return f"{_slug(label)}-seed{seed}-{m.digest()}{exp.data_digest()[:6]}"


# -- per-run work -------------------------------------------------------------

def write_eval(out: Path, ev, bins: int, prefix="") -> None:
    _write(out / f"{prefix}report.txt", ev.report.to_text())
    _write(out / f"{prefix}report.csv", ev.report.to_csv())
    _write(out / f"{prefix}predictions.csv", predictions_csv(ev.predictions))
    rows, _ = density_export(ev.groups, bins)
    _write(out / f"{prefix}density.csv", density_csv(rows))
    _write(out / f"{prefix}density.txt", density_text(rows))


def train_run(exp: cfgmod.ExperimentConfig, seed: int, run_dir: Path, evaluate_test=False):
    exp = exp.with_method(seed=seed)
    data = cfgmod.build_data(exp, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write(run_dir / "config.yaml", exp.dump())
    log.info("training %s", run_dir.name)
    res = train(exp.method, data.train, data.val, data.partition, run_dir=run_dir,
                meta={"run_seed": seed})
    use_best = exp.eval["checkpoint"] == "best" and res.history.rows
    enc, bank = (res.best_encoder, res.best_bank) if use_best else (res.encoder, res.bank)
    which = "best" if use_best else ("final" if res.history.rows else "init")
    val = evaluate(enc, bank, data.val, data.partition, score=exp.eval["score"])
    val.report.checkpoint = which
    _write(run_dir / "report_val.txt", val.report.to_text())
    _write(run_dir / "report_val.csv", val.report.to_csv())
    if evaluate_test:
        test = evaluate(enc, bank, data.test, data.partition, data.ood, score=exp.eval["score"])
        test.report.checkpoint = which
        write_eval(run_dir, test, exp.eval["bins"], prefix="test_")
    return res


def _sweep_worker(args):
    exp_dict, base_dir, label, overrides, seed, run_dir = args
    logging.getLogger().handlers.clear()
    exp = cfgmod.from_dict(exp_dict, base_dir)
    exp = exp.with_method(**{**SWEEP_DEFAULTS, **overrides})
    try:
        train_run(exp, seed, Path(run_dir), evaluate_test=True)
        return label, seed, None
    except Exception as exc:  # noqa: BLE001 - recorded per run
        return label, seed, f"{type(exc).__name__}: {exc}"


# -- aggregation --------------------------------------------------------------

def _median(vals):
    return statistics.median(vals) if vals else float("nan")


def _load_sweep(out: Path):
    manifest = json.loads((out / "sweep.json").read_text())
    results = {}
    for run in manifest["runs"]:
        path = out / run["dir"] / "test_report.csv"
        rep = EvalReport.from_csv(path.read_text()) if path.exists() and not run.get("error") else None
        results.setdefault(run["label"], []).append((run["seed"], rep))
    return manifest, results


def aggregate(out: Path) -> tuple[str, str]:
    """Rebuild summary.txt / summary.csv from per-run reports alone."""
    manifest, results = _load_sweep(out)
    kind, sources = manifest["kind"], manifest["ood_sources"]
    labels = [label for label, _ in (ABLATION_ROWS if kind == "ablation" else BENCHMARK_ROWS)]
    if kind == "ablation":
        text, table = _ablation_tables(labels, results, sources)
    else:
        text, table = _benchmark_tables(labels, results, sources)
    _write(out / "summary.txt", text)
    _write(out / "summary.csv", table)
    return text, table


def _metric_columns(kind, sources):
    if kind == "ablation":
        cols = [("head", lambda r: r.accuracy["head"]), ("middle", lambda r: r.accuracy["middle"]),
                ("tail", lambda r: r.accuracy["tail"]), ("total", lambda r: r.accuracy["total"])]
        if sources:
            src = sources[0]
            cols.append((f"auroc_{src}", lambda r: r.auroc[src]))
        return cols
    cols = [("precision", lambda r: r.precision), ("recall", lambda r: r.recall), ("f1", lambda r: r.f1)]
    for src in sources:
        cols.append((f"auroc_{src}", lambda r, s=src: r.auroc[s]))
    return cols


def _long_csv(kind, labels, results, sources, stats):
    cols = _metric_columns(kind, sources)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", *(c for c, _ in cols)])
    for label in labels:
        runs = results.get(label, [])
        for seed, rep in runs:
            w.writerow([label, seed, *(repr(f(rep)) if rep else "FAILED" for _, f in cols)])
        ok = [rep for _, rep in runs if rep is not None]
        for stat, fn in stats:
            w.writerow([label, stat, *(repr(fn([f(r) for r in ok])) if ok else "FAILED" for _, f in cols)])
    return buf.getvalue()


def _ablation_tables(labels, results, sources):
    cols = _metric_columns("ablation", sources)
    header = list(ABLATION_HEADER)
    rows = []
    for label in labels:
        ok = [rep for _, rep in results.get(label, []) if rep is not None]
        failed = len(ok) < len(results.get(label, []))
        cells = [label]
        for name, f in cols:
            cells.append("FAILED" if failed or not ok else f"{100 * _median([f(r) for r in ok]):.2f}")
        if not sources:
            cells.append("n/a")
        rows.append(cells)
    note = f"# medians over seeds; OOD source: {sources[0] if sources else 'none'}"
    text = note + "\n" + format_table(header, rows) + "\n"
    return text, _long_csv("ablation", labels, results, sources, [("median", _median)])


def _benchmark_tables(labels, results, sources):
    cols = _metric_columns("benchmark", sources)
    header = ["Method", "ID(pre)", "ID(rec)", "ID(f1)", *(f"OOD({s})" for s in sources)]
    rows = []
    for label in labels:
        ok = [rep for _, rep in results.get(label, []) if rep is not None]
        failed = len(ok) < len(results.get(label, []))
        cells = [label]
        for name, f in cols:
            vals = [f(r) for r in ok]
            if failed or not vals:
                cells.append("FAILED")
                continue
            scale, fmt = (100, "{:.2f}") if name.startswith("auroc") else (1, "{:.3f}")
            med, lo, hi = (fmt.format(scale * v) for v in (_median(vals), min(vals), max(vals)))
            cells.append(f"{med} [{lo}, {hi}]")
        rows.append(cells)
    note = "# median [min, max] over seeds; ID metrics macro-averaged"
    text = note + "\n" + format_table(header, rows) + "\n"
    stats = [("median", _median), ("min", min), ("max", max)]
    return text, _long_csv("benchmark", labels, results, sources, stats)


def run_sweep(exp: cfgmod.ExperimentConfig, kind: str, out: Path, base_dir: Path, jobs: int = 1) -> bool:
    rows = ABLATION_ROWS if kind == "ablation" else BENCHMARK_ROWS
    if exp.synthetic is not None:
        sources = ["ood"]
    else:
        sources = list(exp.csv["ood"])
    tasks, manifest = [], {"kind": kind, "ood_sources": sources, "runs": []}
    exp_dict = exp.to_dict()
    for label, overrides in rows:
        probe = exp.with_method(**{**SWEEP_DEFAULTS, **overrides})
        for seed in exp.seeds:
            name = run_name(probe, label, seed)
            run_dir = out / "runs" / name
            tasks.append((exp_dict, str(base_dir), label, overrides, seed, str(run_dir)))
            manifest["runs"].append({"label": label, "seed": seed, "dir": f"runs/{name}"})
    # fail fast on data-level config errors before spending time on runs
    cfgmod.build_data(exp, exp.seeds[0])
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_worker, tasks))
    else:
        outcomes = [_sweep_worker(t) for t in tasks]
    failed = False
    by_key = {(label, seed): err for label, seed, err in outcomes}
    for run in manifest["runs"]:
        err = by_key[(run["label"], run["seed"])]
        if err:
            run["error"] = err
            failed = True
            log.error("run %s failed: %s", run["dir"], err)
    _write(out / "sweep.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    text, _ = aggregate(out)
    print(text, end="")
    return not failed


# -- commands -----------------------------------------------------------------

def cmd_gen_data(exp, out: Path, args):
    if exp.synthetic is None:
        raise ConfigError("gen-data needs a data.synthetic section")
    seed = exp.seeds[0]
    data = cfgmod.build_data(exp, seed)
    for name in ("train", "val", "test"):
        write_csv(getattr(data, name), out / f"{name}.csv")
    write_csv(data.ood["ood"], out / "ood.csv")
    syn = cfgmod.synthetic_for_seed(exp, seed)
    counts = [int(a + b + c) for a, b, c in zip(data.train.counts, data.val.counts, data.test.counts)]
    manifest = {
        "synthetic": asdict(syn),
        "counts": counts,
        "expected_counts": powerlaw_counts(syn.max_class_count, syn.powerlaw_exponent, syn.num_id_classes),
        "split_counts": {n: getattr(data, n).counts.tolist() for n in ("train", "val", "test")},
        "ood_count": len(data.ood["ood"]),
        "partition": data.partition.to_dict(),
        "files": ["train.csv", "val.csv", "test.csv", "ood.csv"],
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return 0


def cmd_train(exp, out: Path, args):
    seed = exp.seeds[0]
    label = f"{exp.method.head_type}-{exp.method.mixup_strategy.value if exp.method.mixup_strategy else 'none'}"
    run_dir = out / "runs" / run_name(exp, label, seed)
    train_run(exp, seed, run_dir)
    print(run_dir)
    return 0


def cmd_eval(exp, out: Path, args):
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint PATH")
    ck = load_checkpoint(args.checkpoint)
    seed = ck.meta.get("run_seed", exp.seeds[0])
    data = cfgmod.build_data(exp, seed)
    if ck.encoder.input_dim != data.test.feature_dim:
        raise LoadError(f"checkpoint expects {ck.encoder.input_dim} features, data has {data.test.feature_dim}")
    M = ck.bank.num_classes if ck.bank is not None else ck.encoder.head.out_dim
    if M != data.test.class_count:
        raise LoadError(f"checkpoint has {M} classes, data has {data.test.class_count}")
    ev = evaluate(ck.encoder, ck.bank, data.test, data.partition, data.ood, score=exp.eval["score"])
    ev.report.checkpoint = Path(args.checkpoint).name
    target = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    write_eval(target, ev, exp.eval["bins"])
    print(ev.report.to_text(), end="")
    return 0


def cmd_sweep(kind):
    def run(exp, out: Path, args):
        if args.aggregate_only:
            print(aggregate(out)[0], end="")
            return 0
        ok = run_sweep(exp, kind, out, Path(args.config).resolve().parent, args.jobs or exp.jobs)
        return 0 if ok else 2
    return run


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablation": cmd_sweep("ablation"),
    "benchmark": cmd_sweep("benchmark"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ltood", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", help="output directory (default: config 'output')")
        p.add_argument("--seeds", help="comma-separated seeds, overrides config")
        p.add_argument("--jobs", type=int, help="parallel runs for sweeps")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
        if name in ("ablation", "benchmark"):
            p.add_argument("--aggregate-only", action="store_true",
                           help="rebuild summaries from existing run directories")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        exp = cfgmod.load(args.config)
        if args.seeds:
            try:
                exp.seeds = [int(s) for s in args.seeds.split(",")]
            except ValueError:
                raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
        out = Path(args.out or exp.output)
        if args.command != "eval":
            _setup_logging(out)
        return COMMANDS[args.command](exp, out, args)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except LtoodError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
