"""Command-line entry points.

    etlrec prepare  --ratings-a A.csv --ratings-b B.csv --out data/
    etlrec synth    --users 2000 --items-a 500 --items-b 500 --shared-dim 8 --specific-dim 4 --out data/
    etlrec train    --config run.txt [--set lam=0.5 ...]
    etlrec eval     --run runs/x [--phase val]
    etlrec analyze  --run runs/x --which mmd,probe
    etlrec sweep    --config run.txt --grid lam=0.1,1 --grid seed=0,1 --out sweeps/lam
    etlrec report   --run runs/x | --sweep sweeps/lam/sweep.csv

Every command exits 0 on success; failures print ``error: <category>: <message>``
on one line of stderr and exit 2.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .analysis import latents, mmd_rbf, paired_ttest, probe_auc
from .config import RunConfig, load_config, parse_config, parse_overrides, save_config
from .dataio import (
    PairedDataset,
    dataset_hash,
    load_dataset,
    load_interactions,
    prepare,
    save_dataset,
    subsample_train,
)
from .errors import AnalysisError, ConfigError, EtlError, FormatError
from .evaluation import MetricsReport, evaluate
from .model import EtlModel, config_hash, load_checkpoint, save_checkpoint
from .numerics import Rng
from .training import fit, write_log

log = logging.getLogger("etlrec")

RUN_FILES = ("config.txt", "log.csv", "model.etl1", "metrics.csv", "metrics.json")
STATS_HEADER = "domain,users,items,interactions,density_pct"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _print_stats(ds: PairedDataset, out=None) -> None:
    out = out or sys.stdout
    print(STATS_HEADER, file=out)
    for s in ds.stats():
        print(f"{s['domain']},{s['users']},{s['items']},{s['interactions']},{100 * s['density']:.4f}", file=out)


def _model_fields(model: EtlModel) -> dict:
    n_a, n_b = model.n_items
    return {
        "latent_dim": model.latent_dim,
        "hidden": model.enc_a.hidden,
        "disc_hidden": model.disc_a.hidden,
        "transform": model.transform.kind,
        "n_items_a": n_a,
        "n_items_b": n_b,
    }


def _resolve(path: str, base: str | None) -> str:
    if os.path.isabs(path) or base is None or os.path.exists(path):
        return path
    cand = os.path.join(base, path)
    return cand if os.path.exists(cand) else path


def _subsample_rng(seed: int) -> Rng:
    # third child of the run seed; fit() uses the first two
    return Rng(seed).spawn(3)[2]


def load_run_dataset(cfg: RunConfig, base: str | None = None) -> PairedDataset:
    if not cfg.dataset:
        raise ConfigError("config has no dataset path")
    ds = load_dataset(_resolve(cfg.dataset, base))
    return subsample_train(ds, cfg.train_ratio, _subsample_rng(cfg.seed))


def load_model(path, ds: PairedDataset | None = None) -> tuple[EtlModel, int]:
    """Read a checkpoint; with ``ds`` given, refuse one built for other shapes."""
    tensors, stored = load_checkpoint(path)
    model = EtlModel.from_tensors(tensors)
    if ds is not None:
        fields = _model_fields(model)
        if (fields["n_items_a"], fields["n_items_b"]) != (ds.a.n_items, ds.b.n_items):
            raise FormatError(
                f"checkpoint has {fields['n_items_a']}/{fields['n_items_b']} items, "
                f"dataset has {ds.a.n_items}/{ds.b.n_items}"
            )
        if config_hash(fields) != stored:
            raise FormatError(f"checkpoint config hash {stored:08x} does not match its tensors/dataset")
    return model, stored


def _read_report(path) -> dict:
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    return {"analysis": {}}


def _write_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _metric_columns(report: MetricsReport) -> dict[str, float]:
    return {f"{d}_{m}{k}": v for (d, m, k), v in sorted(report.values.items())}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    raw_a = load_interactions(args.ratings_a)
    raw_b = load_interactions(args.ratings_b)
    for name, raw in (("a", raw_a), ("b", raw_b)):
        if raw.skipped:
            log.warning("domain %s: skipped %d malformed line(s)", name, raw.skipped)
    ds = prepare(raw_a, raw_b, seed=args.seed, min_count=args.min_count, n_negatives=args.negatives, threshold=args.threshold)
    save_dataset(ds, args.out)
    _print_stats(ds)
    return 0


def cmd_synth(args) -> int:
    from .synth import generate, save_synthetic

    ds, truth = generate(
        args.users,
        args.items_a,
        args.items_b,
        args.shared_dim,
        args.specific_dim,
        sparsity=args.sparsity,
        seed=args.seed,
        min_count=args.min_count,
        n_negatives=args.negatives,
        sharpness=args.sharpness,
    )
    save_synthetic(ds, truth, args.out)
    _print_stats(ds)
    return 0


def run_training(cfg: RunConfig, run_dir: str, base: str | None = None, quiet: bool = False) -> dict:
    """Train one configuration into ``run_dir``; return a summary row."""
    t0 = time.perf_counter()
    cfg = cfg.replace(dataset=os.path.abspath(_resolve(cfg.dataset, base)))
    ds = load_run_dataset(cfg)
    os.makedirs(run_dir, exist_ok=True)
    save_config(cfg.replace(run_dir=run_dir), os.path.join(run_dir, "config.txt"))
    tcfg = cfg.train_config()

    def on_epoch(stats):
        if not quiet:
            log.info("epoch %d  jrl %.4f  val ndcg@10 %.4f / %.4f", stats.epoch, stats.jrl, stats.val_ndcg10_a, stats.val_ndcg10_b)

    res = fit(ds, tcfg, on_epoch=on_epoch)
    write_log(res.log, os.path.join(run_dir, "log.csv"))
    h = config_hash(tcfg.model_fields(ds.a.n_items, ds.b.n_items))
    save_checkpoint(res.model, os.path.join(run_dir, "model.etl1"), h)
    report = evaluate(res.model, ds, "test", tcfg.cutoffs, cfg.uncut_mrr, seed=cfg.seed, config_hash=h)
    report.metadata = {
        "best_epoch": res.best_epoch,
        "best_val_ndcg10": res.best_val,
        "dataset_hash": dataset_hash(ds),
        "train_ratio": cfg.train_ratio,
        "version": __version__,
    }
    report.write_csv(os.path.join(run_dir, "metrics.csv"))
    report.write_json(os.path.join(run_dir, "metrics.json"))
    row = {"best_epoch": res.best_epoch, "best_val_ndcg10": round(res.best_val, 6)}
    row.update({k: round(v, 6) for k, v in _metric_columns(report).items()})
    row["seconds"] = round(time.perf_counter() - t0, 1)
    return row


def cmd_train(args) -> int:
    cfg = load_config(args.config, overrides=parse_overrides(args.set))
    run_dir = args.run_dir or cfg.run_dir
    row = run_training(cfg, run_dir, base=os.path.dirname(os.path.abspath(args.config)))
    print("key,value")
    for k, v in row.items():
        print(f"{k},{v}")
    return 0


def _run_context(args) -> tuple[EtlModel, PairedDataset, RunConfig | None, str]:
    """Model, dataset, config (if any) and output dir for eval/analyze."""
    cfg = None
    if args.run:
        cfg_path = os.path.join(args.run, "config.txt")
        cfg = load_config(cfg_path)
        ds = load_run_dataset(cfg, base=args.run) if not args.dataset else load_dataset(args.dataset)
        ckpt = args.checkpoint or os.path.join(args.run, "model.etl1")
        out = args.out or args.run
    else:
        if not (args.checkpoint and args.dataset):
            raise ConfigError("give --run, or both --checkpoint and --dataset")
        ds = load_dataset(args.dataset)
        ckpt = args.checkpoint
        out = args.out or "."
    model, _ = load_model(ckpt, ds)
    return model, ds, cfg, out


def cmd_eval(args) -> int:
    model, ds, cfg, out = _run_context(args)
    cutoffs = tuple(int(k) for k in args.cutoffs.split(","))
    seed = cfg.seed if cfg else None
    h = config_hash(_model_fields(model))
    report = evaluate(model, ds, args.phase, cutoffs, args.uncut_mrr, seed=seed, config_hash=h)
    report.metadata = {"dataset_hash": dataset_hash(ds), "version": __version__}
    os.makedirs(out, exist_ok=True)
    # test metrics keep the run's canonical names; other phases get their own files
    stem = "metrics" if args.phase == "test" else f"metrics_{args.phase}"
    report.write_csv(os.path.join(out, stem + ".csv"))
    prev = _read_report(os.path.join(out, stem + ".json"))
    doc = report.to_json()
    doc["analysis"] = prev.get("analysis", {})
    _write_json(doc, os.path.join(out, stem + ".json"))
    print("domain,phase,metric,k,value")
    for d, ph, m, k, v in report.rows():
        print(f"{d},{ph},{m},{k},{v:.6f}")
    return 0


def _ttest_from_sweep(path, compare: str, a: str, b: str, metric: str) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for col in (compare, metric, "seed"):
        if rows and col not in rows[0]:
            raise AnalysisError(f"sweep table has no column {col!r}")
    by_seed: dict[str, dict[str, float]] = {}
    for r in rows:
        if r[compare] in (a, b):
            by_seed.setdefault(r["seed"], {})[r[compare]] = float(r[metric])
    seeds = sorted((s for s, v in by_seed.items() if a in v and b in v), key=float)
    xa = [by_seed[s][a] for s in seeds]
    xb = [by_seed[s][b] for s in seeds]
    t, p = paired_ttest(xa, xb)
    return {
        "metric": metric,
        "compare": compare,
        "a": a,
        "b": b,
        "seeds": [int(float(s)) for s in seeds],
        "mean_a": float(np.mean(xa)),
        "mean_b": float(np.mean(xb)),
        "t": t,
        "p": p,
    }


def cmd_analyze(args) -> int:
    which = [w.strip() for w in args.which.split(",") if w.strip()]
    bad = set(which) - {"mmd", "probe", "ttest"}
    if bad:
        raise ConfigError(f"unknown analysis {sorted(bad)}; choose from mmd, probe, ttest")
    results: dict = {}
    out = args.out or args.run or "."
    if "mmd" in which or "probe" in which:
        model, ds, cfg, out = _run_context(args)
        z_a, z_b = latents(model, ds)
        seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
        if "mmd" in which:
            results["mmd"] = {"value": mmd_rbf(z_a, z_b), "sigmas": [1.0, 2.0, 4.0, 8.0, 16.0], "n_users": ds.n_users}
        if "probe" in which:
            aucs = probe_auc(z_a, z_b, Rng(seed), runs=args.probe_runs, hidden=args.probe_hidden, epochs=args.probe_epochs)
            results["probe_auc"] = {"runs": aucs, "mean": float(np.mean(aucs)), "std": float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0}
    if "ttest" in which:
        if not args.sweep:
            raise ConfigError("ttest needs --sweep with a sweep.csv")
        results["ttest"] = _ttest_from_sweep(args.sweep, args.compare, args.a, args.b, args.metric)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "metrics.json")
    doc = _read_report(path)
    doc.setdefault("analysis", {}).update(results)
    _write_json(doc, path)
    print("analysis,key,value")
    for name, res in results.items():
        for k, v in res.items():
            if isinstance(v, list):
                v = ";".join(f"{x:.6f}" if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = f"{v:.6f}"
            print(f"{name},{k},{v}")
    return 0


def parse_grid(items: list[str]) -> dict[str, list[str]]:
    grid: dict[str, list[str]] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"grid axis {item!r} is not key=v1,v2,...")
        k, vals = item.split("=", 1)
        values = [v.strip() for v in vals.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"grid axis {k!r} has no values")
        grid[k.strip()] = values
    return grid


def _sweep_one(job):
    text, overrides, run_dir, base = job
    cfg = parse_config(text, overrides=overrides)
    return run_training(cfg, run_dir, base=base, quiet=True)


def cmd_sweep(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        text = fh.read()
    base_over = parse_overrides(args.set)
    grid = parse_grid(args.grid)
    keys = list(grid)
    combos = list(itertools.product(*(grid[k] for k in keys))) if keys else [()]
    base = os.path.dirname(os.path.abspath(args.config))
    os.makedirs(args.out, exist_ok=True)
    jobs = []
    for i, combo in enumerate(combos):
        over = dict(base_over)
        over.update(dict(zip(keys, combo)))
        parse_config(text, overrides=over)  # fail fast on bad keys or values
        jobs.append((text, over, os.path.join(args.out, f"run_{i:03d}"), base))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = []
        for j in jobs:
            rows.append(_sweep_one(j))
            log.info("finished %s", j[2])
    header = ["run"] + keys + list(rows[0]) if rows else ["run"] + keys
    if "seed" not in keys:
        header.insert(1 + len(keys), "seed")
    out_path = os.path.join(args.out, "sweep.csv")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for (text_, over, run_dir, _), combo, row in zip(jobs, combos, rows):
            seed = parse_config(text, overrides=over).seed
            vals = {"run": os.path.basename(run_dir), "seed": seed, **dict(zip(keys, combo)), **row}
            w.writerow([vals[h] for h in header])
    with open(out_path, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


def cmd_report(args) -> int:
    from . import plotting

    if not args.run and not args.sweep:
        raise ConfigError("give --run and/or --sweep")
    figures = []
    for run in args.run or []:
        mpath = os.path.join(run, "metrics.csv")
        if not os.path.exists(mpath):
            raise FormatError(f"{run}: no metrics.csv (train or eval first)")
        out = args.out or run
        figures += plotting.render_run(run, out)
        print("run,domain,phase,metric,k,value")
        for r in plotting.read_csv(mpath):
            print(f"{os.path.basename(os.path.normpath(run))},{r['domain']},{r['phase']},{r['metric']},{r['k']},{r['value']}")
    if args.sweep:
        rows = plotting.read_csv(args.sweep)
        if not rows:
            raise FormatError(f"{args.sweep}: empty sweep table")
        cols = list(rows[0])
        x_key = args.x or (cols[1] if len(cols) > 1 else cols[0])
        if x_key not in cols:
            raise ConfigError(f"sweep table has no column {x_key!r}")
        y_keys = [y for y in (args.y.split(",") if args.y else ["a_HR10", "b_HR10"]) if y in cols]
        if not y_keys:
            raise ConfigError("none of the requested --y columns are in the sweep table")
        out = args.out or os.path.dirname(os.path.abspath(args.sweep))
        os.makedirs(out, exist_ok=True)
        figures.append(plotting.plot_sweep(rows, x_key, y_keys, os.path.join(out, f"sweep_{x_key}.png")))
        with open(args.sweep, encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
    for f in figures:
        log.info("wrote %s", f)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="etlrec", description="Cross-domain recommendation with equivalent transformation.")
    p.add_argument("--version", action="version", version=f"etlrec {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="build a paired leave-one-out dataset from two rating files")
    s.add_argument("--ratings-a", required=True)
    s.add_argument("--ratings-b", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-count", type=int, default=5)
    s.add_argument("--negatives", type=int, default=99)
    s.add_argument("--threshold", type=float, default=3.0, help="ratings >= threshold count as positive")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", help="generate a synthetic paired dataset")
    s.add_argument("--users", type=int, default=2000)
    s.add_argument("--items-a", type=int, default=500)
    s.add_argument("--items-b", type=int, default=500)
    s.add_argument("--shared-dim", type=int, default=8)
    s.add_argument("--specific-dim", type=int, default=4)
    s.add_argument("--sparsity", type=float, default=0.97)
    s.add_argument("--sharpness", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-count", type=int, default=5)
    s.add_argument("--negatives", type=int, default=99)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one configuration into a run directory")
    s.add_argument("--config", required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--run-dir")
    s.set_defaults(func=cmd_train)

    for name, helptext in (("eval", "evaluate a checkpoint"), ("analyze", "latent-space diagnostics")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--run", help="run directory (config.txt + model.etl1)")
        s.add_argument("--checkpoint")
        s.add_argument("--dataset")
        s.add_argument("--out", help="directory for metrics.csv / metrics.json")
        if name == "eval":
            s.add_argument("--phase", choices=("val", "test"), default="test")
            s.add_argument("--cutoffs", default="5,10")
            s.add_argument("--uncut-mrr", action="store_true")
            s.set_defaults(func=cmd_eval)
        else:
            s.add_argument("--which", default="mmd,probe", help="comma list of mmd, probe, ttest")
            s.add_argument("--seed", type=int)
            s.add_argument("--probe-runs", type=int, default=10)
            s.add_argument("--probe-hidden", type=int, default=100)
            s.add_argument("--probe-epochs", type=int, default=100)
            s.add_argument("--sweep", help="sweep.csv for ttest")
            s.add_argument("--compare", default="ablation", help="sweep column that separates the two arms")
            s.add_argument("--a", default="full-etl")
            s.add_argument("--b", default="aae++")
            s.add_argument("--metric", default="a_HR10")
            s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", help="train every point of a hyperparameter grid")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2", help="one grid axis; repeatable")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="print results and render figures")
    s.add_argument("--run", action="append", help="run directory; repeatable")
    s.add_argument("--sweep", help="sweep.csv to plot")
    s.add_argument("--x", help="sweep column for the x axis")
    s.add_argument("--y", help="comma list of sweep columns to plot")
    s.add_argument("--out", help="figure directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except EtlError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
    except ValueError as e:
        print(f"error: value: {e}", file=sys.stderr)
    return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
