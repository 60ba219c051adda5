"""Latent-space diagnostics.

* ``mmd_rbf``: distance between the two domains' latent clouds (large when
  each domain keeps its own specific features).
* pairing probe: can a small classifier tell a user's own (z_a, z_b) pair
  from a random pairing?  Measures how much the latents overlap.
* ``paired_ttest`` for comparing per-seed results.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import stdtr
from scipy.stats import rankdata

from .dataio import PairedDataset
from .errors import AnalysisError
from .model import EtlModel, encode
from .numerics import AdamState, Mlp2Params, Rng, adam_update, bce_loss, mlp2_backward, mlp2_forward

DEFAULT_SIGMAS = (1.0, 2.0, 4.0, 8.0, 16.0)


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * (x @ y.T)
    return np.maximum(d, 0.0)


def mmd_rbf(x, y, sigmas=DEFAULT_SIGMAS) -> float:
    """Biased (V-statistic) squared MMD with a sum of RBF kernels, in float64.

    k(u, v) = sum_s exp(-|u - v|^2 / (2 s^2)).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise AnalysisError(f"sample widths differ: {x.shape[1]} vs {y.shape[1]}")
    if len(x) < 1 or len(y) < 1 or not len(sigmas):
        raise AnalysisError("need at least one sample per side and one bandwidth")
    dxx, dyy, dxy = _sq_dists(x, x), _sq_dists(y, y), _sq_dists(x, y)
    total = 0.0
    for s in sigmas:
        g = 1.0 / (2.0 * float(s) ** 2)
        total += np.exp(-g * dxx).mean() + np.exp(-g * dyy).mean() - 2.0 * np.exp(-g * dxy).mean()
    return float(total)


def latents(model: EtlModel, ds: PairedDataset, batch: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-mode latent codes of every user's train rows, per domain."""
    out = []
    for which, d in (("a", ds.a), ("b", ds.b)):
        parts = [encode(d.train[lo : lo + batch], which, model) for lo in range(0, ds.n_users, batch)]
        out.append(np.concatenate(parts, axis=0))
    return out[0], out[1]


@dataclass
class ProbeDataset:
    features: np.ndarray
    labels: np.ndarray
    users: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = getattr(self, name)
        return self.features[idx], self.labels[idx]


def build_probe(z_a: np.ndarray, z_b: np.ndarray, rng: Rng, fractions=(0.6, 0.2, 0.2)) -> ProbeDataset:
    """One paired and one mismatched example per user; splits are by user."""
    z_a = np.asarray(z_a)
    z_b = np.asarray(z_b)
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise AnalysisError(f"latent matrices must share shape, got {z_a.shape} vs {z_b.shape}")
    n = len(z_a)
    if n < 5:
        raise AnalysisError(f"need at least 5 users for a probe, got {n}")
    # offset in [1, n) guarantees j != i
    partner = (np.arange(n) + rng.integers(1, n, size=n)) % n
    pos = np.concatenate([z_a, z_b], axis=1)
    neg = np.concatenate([z_a, z_b[partner]], axis=1)
    features = np.concatenate([pos, neg]).astype(np.float32)
    labels = np.concatenate([np.ones(n), np.zeros(n)]).astype(np.float32)
    users = np.concatenate([np.arange(n), np.arange(n)])
    perm = rng.permutation(n)
    n_tr = int(round(fractions[0] * n))
    n_va = int(round(fractions[1] * n))
    groups = perm[:n_tr], perm[n_tr : n_tr + n_va], perm[n_tr + n_va :]
    idx = [np.concatenate([g, g + n]) for g in groups]
    return ProbeDataset(features, labels, users, *idx)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AnalysisError("AUC is undefined with a single class")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def train_probe(
    probe: ProbeDataset,
    hidden: int = 100,
    epochs: int = 100,
    rng: Rng | None = None,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> np.ndarray:
    """Fit a two-layer classifier on the train split; return test-split probabilities.

    The epoch with the best validation AUC supplies the returned scores.
    """
    rng = rng if rng is not None else Rng(0)
    x_tr, y_tr = probe.split("train")
    x_va, y_va = probe.split("val")
    x_te, _ = probe.split("test")
    params = Mlp2Params.init(x_tr.shape[1], hidden, 1, rng)
    flat = {f"p.{k}": v for k, v in params.items()}
    state = AdamState()

    def predict(x):
        return mlp2_forward(x, params, out_act="sigmoid")[0][:, 0]

    best_scores = predict(x_te)
    best_val = -1.0
    for _ in range(epochs):
        order = rng.permutation(len(x_tr))
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            logits, tr = mlp2_forward(x_tr[idx], params)
            loss, g = bce_loss(logits, y_tr[idx, None])
            if not math.isfinite(loss):
                raise AnalysisError("probe training diverged")
            grads, _ = mlp2_backward(tr, g, need_input_grad=False)
            adam_update(flat, {f"p.{k}": v for k, v in grads.items()}, state, lr=lr)
        if len(np.unique(y_va)) == 2:
            v = auc(predict(x_va), y_va)
            if v > best_val:
                best_val, best_scores = v, predict(x_te)
        else:
            best_scores = predict(x_te)
    return best_scores


def probe_auc(z_a, z_b, rng: Rng, runs: int = 10, hidden: int = 100, epochs: int = 100) -> list[float]:
    """Test AUC of independently seeded probe runs."""
    out = []
    for r in rng.spawn(runs):
        probe = build_probe(z_a, z_b, r)
        scores = train_probe(probe, hidden, epochs, r)
        out.append(auc(scores, probe.labels[probe.test]))
    return out


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    return float(stdtr(df, -t))


def paired_ttest(a, b) -> tuple[float, float]:
    """Two-sided paired t-test.  All-zero differences give (0, 1); zero
    spread with a nonzero mean gives (+-inf, 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise AnalysisError(f"paired samples must have equal 1-d shapes, got {a.shape} vs {b.shape}")
    if a.size < 2:
        raise AnalysisError("need at least two pairs")
    d = a - b
    if np.all(d == 0):
        return 0.0, 1.0
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(d.size))
    return float(t), 2.0 * student_t_sf(abs(t), d.size - 1)
