"""Figures for ``etlrec report``; rendered headless to PNG files."""
from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _num(v: str) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return float("nan")


def plot_training_log(log_rows: list[dict[str, str]], path) -> str:
    """Loss components and validation NDCG@10 per epoch."""
    epochs = [int(r["epoch"]) for r in log_rows]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("jrl", "penalty", "disc", "gen"):
        ax_loss.plot(epochs, [_num(r[key]) for r in log_rows], label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean batch loss")
    ax_loss.set_yscale("symlog", linthresh=1e-2)
    ax_loss.legend()
    for key, label in (("val_ndcg10_a", "domain a"), ("val_ndcg10_b", "domain b")):
        ax_val.plot(epochs, [_num(r[key]) for r in log_rows], marker=".", label=label)
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation NDCG@10")
    ax_val.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_metrics(metric_rows: list[dict[str, str]], path) -> str:
    """Grouped bars: one group per metric@K, one bar per domain."""
    labels = sorted({f"{r['metric']}@{r['k']}" for r in metric_rows})
    domains = sorted({r["domain"] for r in metric_rows})
    lookup = {(r["domain"], f"{r['metric']}@{r['k']}"): _num(r["value"]) for r in metric_rows}
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(labels)), 4))
    width = 0.8 / max(len(domains), 1)
    for j, dom in enumerate(domains):
        xs = [i + j * width for i in range(len(labels))]
        ax.bar(xs, [lookup.get((dom, lab), float("nan")) for lab in labels], width, label=f"domain {dom}")
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(labels))])
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1)
    ax.set_ylabel("value")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_sweep(sweep_rows: list[dict[str, str]], x_key: str, y_keys: list[str], path) -> str:
    """Mean (and spread over the remaining grid axes) of each y column against ``x_key``."""
    groups: dict[str, list[dict[str, str]]] = {}
    for r in sweep_rows:
        groups.setdefault(r[x_key], []).append(r)
    xs = list(groups)
    numeric = all(_num(x) == _num(x) for x in xs)
    if numeric:
        xs.sort(key=_num)
    fig, ax = plt.subplots(figsize=(6, 4))
    pos = [_num(x) for x in xs] if numeric else list(range(len(xs)))
    for y in y_keys:
        vals = [[_num(r[y]) for r in groups[x]] for x in xs]
        means = [sum(v) / len(v) for v in vals]
        lo = [m - min(v) for m, v in zip(means, vals)]
        hi = [max(v) - m for m, v in zip(means, vals)]
        ax.errorbar(pos, means, yerr=[lo, hi], marker="o", capsize=3, label=y)
    if not numeric:
        ax.set_xticks(pos)
        ax.set_xticklabels(xs)
    ax.set_xlabel(x_key)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def render_run(run_dir, out_dir=None) -> list[str]:
    """Every figure that the files present in ``run_dir`` allow."""
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    made = []
    log_path = os.path.join(run_dir, "log.csv")
    if os.path.exists(log_path):
        rows = read_csv(log_path)
        if rows:
            made.append(plot_training_log(rows, os.path.join(out_dir, "training.png")))
    metrics_path = os.path.join(run_dir, "metrics.csv")
    if os.path.exists(metrics_path):
        made.append(plot_metrics(read_csv(metrics_path), os.path.join(out_dir, "metrics.png")))
    return made
