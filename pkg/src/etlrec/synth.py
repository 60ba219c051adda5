"""Desk-scale synthetic paired datasets with a known cross-domain link.

Each user has a shared taste vector ``s`` and per-domain specific vectors.
Domain ``a`` sees ``[s | spec_a]``, domain ``b`` sees ``[s R | spec_b]`` for a
random rotation ``R``; interactions are Bernoulli draws from inner-product
logits, with a global offset tuned so the expected density hits
``1 - sparsity``.
"""
from __future__ import annotations

import logging
import os

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .dataio import Interactions, PairedDataset, kcore_filter, loo_split, pair_domains, save_dataset
from .errors import PairingError, SplitError
from .numerics import Rng

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 5


def random_rotation(dim: int, rng: Rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _interactions(users: np.ndarray, items: np.ndarray, density: float, sharpness: float, rng: Rng) -> np.ndarray:
    width = users.shape[1]
    logits = sharpness * (users @ items.T) / np.sqrt(width)
    offset = brentq(lambda c: expit(logits + c).mean() - density, -60.0, 60.0)
    return rng.random(logits.shape) < expit(logits + offset)


def _to_records(mask: np.ndarray, prefix: str, user_ids: np.ndarray) -> Interactions:
    u, i = np.nonzero(mask)
    return Interactions(
        np.array([f"u{k:06d}" for k in user_ids[u]], dtype=object),
        np.array([f"{prefix}{k:05d}" for k in i], dtype=object),
    )


def generate(
    n_users: int,
    n_items_a: int,
    n_items_b: int,
    shared_dim: int,
    specific_dim: int,
    sparsity: float = 0.97,
    seed: int = 0,
    min_count: int = 5,
    n_negatives: int = 99,
    sharpness: float = 3.0,
) -> tuple[PairedDataset, dict[str, np.ndarray]]:
    """Build a split dataset plus its ground-truth factors (for kept users)."""
    if n_users < 1 or n_items_a < 1 or n_items_b < 1:
        raise ValueError("user and item counts must be >= 1")
    if shared_dim < 0 or specific_dim < 0 or shared_dim + specific_dim < 1:
        raise ValueError("need shared_dim + specific_dim >= 1 (each >= 0)")
    if not 0.0 < sparsity < 1.0:
        raise ValueError("sparsity must be in (0, 1)")
    root = Rng(seed)
    for attempt in range(MAX_ATTEMPTS):
        r = root.spawn(1)[0].spawn(6)
        shared = r[0].normal(size=(n_users, shared_dim))
        spec_a = r[1].normal(size=(n_users, specific_dim))
        spec_b = r[2].normal(size=(n_users, specific_dim))
        rot = random_rotation(shared_dim, r[3]) if shared_dim else np.zeros((0, 0))
        u_a = np.concatenate([shared, spec_a], axis=1)
        u_b = np.concatenate([shared @ rot, spec_b], axis=1)
        width = shared_dim + specific_dim
        v_a = r[4].normal(size=(n_items_a, width))
        v_b = r[4].normal(size=(n_items_b, width))
        mask_a = _interactions(u_a, v_a, 1.0 - sparsity, sharpness, r[5])
        mask_b = _interactions(u_b, v_b, 1.0 - sparsity, sharpness, r[5])
        ids = np.arange(n_users)
        rec_a = kcore_filter(_to_records(mask_a, "a", ids), min_count)
        rec_b = kcore_filter(_to_records(mask_b, "b", ids), min_count)
        try:
            paired = pair_domains(rec_a, rec_b)
            ds = loo_split(paired, n_negatives=n_negatives, rng=root.split())
        except (SplitError, PairingError) as e:
            log.info("synthetic attempt %d infeasible: %s", attempt + 1, e)
            continue
        ds.seed = seed
        ds.min_count = min_count
        kept = np.array([int(u[1:]) for u in ds.users])
        truth = {
            "user_shared": shared[kept],
            "user_specific_a": spec_a[kept],
            "user_specific_b": spec_b[kept],
            "rotation": rot,
            "item_factors_a": v_a,
            "item_factors_b": v_b,
        }
        return ds, truth
    raise SplitError(f"could not build a feasible split in {MAX_ATTEMPTS} attempts; lower the sparsity")


def save_synthetic(ds: PairedDataset, truth: dict[str, np.ndarray], out_dir) -> None:
    save_dataset(ds, out_dir)
    np.savez(os.path.join(out_dir, "truth.npz"), **truth)
