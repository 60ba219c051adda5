"""Leave-one-out ranking metrics (HR, NDCG, MRR at K)."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import DOMAINS, PairedDataset
from .errors import EvaluationError
from .model import EtlModel, decode, encode

METRICS = ("HR", "NDCG", "MRR")


def rank_position(scores: dict[int, float], target: int, negatives) -> int:
    """1-based rank of ``target`` among itself and ``negatives``.

    Higher score ranks first; equal scores go to the smaller item id.
    """
    negatives = [int(n) for n in negatives]
    if target in negatives:
        raise EvaluationError(f"target {target} is among its own negatives")
    try:
        t = scores[target]
        neg = [(scores[n], n) for n in negatives]
    except KeyError as e:
        raise EvaluationError(f"no score for item {e.args[0]}") from None
    return 1 + sum(1 for s, n in neg if s > t or (s == t and n < target))


def hr_at_k(pos: int, k: int) -> float:
    return 1.0 if pos <= k else 0.0


def ndcg_at_k(pos: int, k: int) -> float:
    return 1.0 / math.log2(pos + 1) if pos <= k else 0.0


def mrr_at_k(pos: int, k: int) -> float:
    return 1.0 / pos if pos <= k else 0.0


def rank_positions(target_scores, target_ids, neg_scores, neg_ids) -> np.ndarray:
    """Vectorised :func:`rank_position` over users (rows)."""
    t = np.asarray(target_scores)[:, None]
    tid = np.asarray(target_ids)[:, None]
    ahead = (neg_scores > t) | ((neg_scores == t) & (neg_ids < tid))
    return 1 + ahead.sum(axis=1)


def metric_values(positions: np.ndarray, k: int) -> dict[str, np.ndarray]:
    pos = np.asarray(positions, dtype=np.float64)
    hit = pos <= k
    return {
        "HR": hit.astype(np.float64),
        "NDCG": np.where(hit, 1.0 / np.log2(pos + 1.0), 0.0),
        "MRR": np.where(hit, 1.0 / pos, 0.0),
    }


def score_candidates(model: EtlModel, ds: PairedDataset, which: str, phase: str, batch: int = 1024):
    """Logits of the held-out item and of its negatives, per user."""
    d = ds.domain(which)
    if model.n_items[DOMAINS.index(which)] != d.n_items:
        raise EvaluationError(f"model has {model.n_items} items, dataset domain {which} has {d.n_items}")
    if phase == "val":
        target, negs = d.val_item, d.val_neg
    elif phase == "test":
        target, negs = d.test_item, d.test_neg
    else:
        raise ValueError(f"phase must be 'val' or 'test', got {phase!r}")
    t_scores = np.empty(ds.n_users, dtype=np.float64)
    n_scores = np.empty(negs.shape, dtype=np.float64)
    for lo in range(0, ds.n_users, batch):
        hi = min(lo + batch, ds.n_users)
        logits = decode(encode(d.train[lo:hi], which, model, training=False), which, model)
        rows = np.arange(hi - lo)
        t_scores[lo:hi] = logits[rows, target[lo:hi]]
        n_scores[lo:hi] = logits[rows[:, None], negs[lo:hi]]
    return t_scores, target, n_scores, negs


@dataclass
class MetricsReport:
    phase: str
    values: dict[tuple[str, str, int], float] = field(default_factory=dict)
    n_users: int = 0
    seed: int | None = None
    config_hash: int | None = None
    metadata: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)

    def get(self, domain: str, metric: str, k: int) -> float:
        return self.values[(domain, metric, k)]

    def rows(self) -> list[tuple[str, str, str, int, float]]:
        return [(d, self.phase, m, k, v) for (d, m, k), v in self.values.items()]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["domain", "phase", "metric", "k", "value"])
            for d, ph, m, k, v in self.rows():
                w.writerow([d, ph, m, k, f"{v:.6f}"])

    def to_json(self) -> dict:
        return {
            "phase": self.phase,
            "n_users": self.n_users,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "metrics": [
                {"domain": d, "metric": m, "k": k, "value": v} for (d, m, k), v in self.values.items()
            ],
            "metadata": self.metadata,
            "analysis": self.analysis,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate(
    model: EtlModel,
    ds: PairedDataset,
    phase: str = "test",
    cutoffs=(5, 10),
    uncut_mrr: bool = False,
    seed: int | None = None,
    config_hash: int | None = None,
) -> MetricsReport:
    """Rank each user's held-out item against its fixed negatives, both domains."""
    if not ds.is_split:
        raise EvaluationError("dataset has no leave-one-out split")
    report = MetricsReport(phase=phase, n_users=ds.n_users, seed=seed, config_hash=config_hash)
    for which in DOMAINS:
        pos = rank_positions(*score_candidates(model, ds, which, phase))
        for k in cutoffs:
            for m, vals in metric_values(pos, k).items():
                report.values[(which, m, k)] = float(vals.mean())
        if uncut_mrr:
            report.values[(which, "MRR_uncut", 1 + ds.n_negatives)] = float((1.0 / pos).mean())
    return report


def mean_val_ndcg(model: EtlModel, ds: PairedDataset, k: int = 10) -> tuple[float, float]:
    rep = evaluate(model, ds, "val", cutoffs=(k,))
    return rep.get("a", "NDCG", k), rep.get("b", "NDCG", k)
