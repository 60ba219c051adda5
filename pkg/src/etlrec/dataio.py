"""Rating logs to a paired, leave-one-out split dataset.

Pipeline: ``load_interactions`` -> ``binarize`` -> ``kcore_filter`` (per
domain) -> ``pair_domains`` -> ``loo_split`` -> ``save_dataset``.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, PairingError, SplitError
from .numerics import FLOAT, Rng, SparseRow

log = logging.getLogger(__name__)

DATASET_MAGIC = "etlrec-dataset"
DATASET_VERSION = 1
DOMAINS = ("a", "b")


@dataclass
class RawRatings:
    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)
    ratings: list[float] = field(default_factory=list)
    timestamps: list[int] = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return len(self.users)

    def records(self):
        return zip(self.users, self.items, self.ratings, self.timestamps)


@dataclass
class Interactions:
    """Deduplicated implicit (user, item) pairs, sorted by (user, item)."""

    users: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.users, dtype=object)
        i = np.asarray(self.items, dtype=object)
        pairs = sorted(set(zip(u.tolist(), i.tolist())))
        self.users = np.array([p[0] for p in pairs], dtype=object)
        self.items = np.array([p[1] for p in pairs], dtype=object)

    def __len__(self):
        return len(self.users)

    def pairs(self) -> set[tuple[str, str]]:
        return set(zip(self.users.tolist(), self.items.tolist()))


def load_interactions(path, max_bad_fraction: float = 0.01) -> RawRatings:
    """Parse ``user,item,rating,timestamp`` lines.

    Malformed lines (wrong arity, unparsable numbers, empty tokens, rating
    outside [0, 5]) are skipped and counted.  More than ``max_bad_fraction``
    of them is treated as a format error.
    """
    raw = RawRatings()
    total = 0
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            total += 1
            try:
                user, item, rating, ts = (c.strip() for c in row)
                r = float(rating)
                t = int(float(ts))
            except ValueError:
                raw.skipped += 1
                continue
            if not user or not item or not (0.0 <= r <= 5.0):
                raw.skipped += 1
                continue
            raw.users.append(user)
            raw.items.append(item)
            raw.ratings.append(r)
            raw.timestamps.append(t)
    if raw.skipped:
        log.info("%s: skipped %d of %d lines", path, raw.skipped, total)
    if total and raw.skipped / total > max_bad_fraction:
        raise FormatError(f"{path}: {raw.skipped}/{total} malformed lines")
    return raw


def binarize(raw: RawRatings, threshold: float = 3.0) -> Interactions:
    if not 0.0 < threshold <= 5.0:
        raise ValueError(f"threshold must be in (0, 5], got {threshold}")
    keep = [(u, i) for u, i, r, _ in raw.records() if r >= threshold]
    return Interactions([u for u, _ in keep], [i for _, i in keep])


def kcore_filter(records: Interactions, min_count: int = 5) -> Interactions:
    """Peel users and items below ``min_count`` until nothing changes."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if len(records) == 0:
        return records
    u_tok, u_code = np.unique(records.users.astype(str), return_inverse=True)
    i_tok, i_code = np.unique(records.items.astype(str), return_inverse=True)
    alive = np.ones(len(records), dtype=bool)
    while True:
        u_deg = np.bincount(u_code[alive], minlength=len(u_tok))
        i_deg = np.bincount(i_code[alive], minlength=len(i_tok))
        drop = alive & ((u_deg[u_code] < min_count) | (i_deg[i_code] < min_count))
        if not drop.any():
            break
        alive &= ~drop
    if not alive.any():
        log.warning("k-core filter with min_count=%d removed every interaction", min_count)
    return Interactions(records.users[alive], records.items[alive])


@dataclass
class DomainData:
    """One domain of a paired dataset (an interaction matrix plus LOO split)."""

    items: list[str]
    train: sp.csr_matrix
    val_item: np.ndarray | None = None
    test_item: np.ndarray | None = None
    val_neg: np.ndarray | None = None
    test_neg: np.ndarray | None = None

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def item_index(self) -> dict[str, int]:
        return {t: k for k, t in enumerate(self.items)}

    def row(self, u: int) -> SparseRow:
        lo, hi = self.train.indptr[u], self.train.indptr[u + 1]
        return SparseRow(self.n_items, self.train.indices[lo:hi], self.train.data[lo:hi])

    def user_items(self, u: int) -> set[int]:
        """Train items plus the reserved val/test items."""
        s = set(self.row(u).indices.tolist())
        if self.val_item is not None:
            s.add(int(self.val_item[u]))
            s.add(int(self.test_item[u]))
        return s


@dataclass
class PairedDataset:
    users: list[str]
    a: DomainData
    b: DomainData
    seed: int | None = None
    min_count: int = 5
    n_negatives: int = 99

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def domains(self) -> tuple[DomainData, DomainData]:
        return self.a, self.b

    def domain(self, which: str) -> DomainData:
        if which not in DOMAINS:
            raise ValueError(f"unknown domain {which!r}")
        return self.a if which == "a" else self.b

    @property
    def user_index(self) -> dict[str, int]:
        return {t: k for k, t in enumerate(self.users)}

    @property
    def is_split(self) -> bool:
        return self.a.val_item is not None

    def stats(self) -> list[dict]:
        out = []
        for name, d in zip(DOMAINS, self.domains):
            n_inter = int(d.train.nnz) + (2 * self.n_users if self.is_split else 0)
            out.append(
                {
                    "domain": name,
                    "users": self.n_users,
                    "items": d.n_items,
                    "interactions": n_inter,
                    "density": n_inter / (self.n_users * d.n_items) if self.n_users and d.n_items else 0.0,
                }
            )
        return out


def _csr_from_lists(rows: list[list[int]], n_cols: int) -> sp.csr_matrix:
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    for k, r in enumerate(rows):
        indptr[k + 1] = indptr[k] + len(r)
    indices = np.fromiter((c for r in rows for c in sorted(r)), dtype=np.int32, count=int(indptr[-1]))
    data = np.ones(indices.size, dtype=FLOAT)
    return sp.csr_matrix((data, indices, indptr), shape=(len(rows), n_cols))


def pair_domains(a: Interactions, b: Interactions, min_per_domain: int = 3) -> PairedDataset:
    """Keep users present in both domains; index items per domain.

    Users with fewer than ``min_per_domain`` interactions in either domain
    are dropped, since the LOO split needs two reserved items plus one train
    item.
    """
    by_user: list[dict[str, set[str]]] = [{}, {}]
    for k, rec in enumerate((a, b)):
        for u, i in zip(rec.users.tolist(), rec.items.tolist()):
            by_user[k].setdefault(u, set()).add(i)
    shared = sorted(set(by_user[0]) & set(by_user[1]))
    if not shared:
        raise PairingError("the two domains share no users")
    kept = [u for u in shared if min(len(by_user[0][u]), len(by_user[1][u])) >= min_per_domain]
    if len(kept) < len(shared):
        log.info("dropped %d shared users with < %d interactions", len(shared) - len(kept), min_per_domain)
    if not kept:
        raise PairingError("no shared user has enough interactions in both domains")
    domains = []
    for k in range(2):
        items = sorted({i for u in kept for i in by_user[k][u]})
        index = {t: c for c, t in enumerate(items)}
        rows = [[index[i] for i in by_user[k][u]] for u in kept]
        domains.append(DomainData(items=items, train=_csr_from_lists(rows, len(items))))
    return PairedDataset(users=kept, a=domains[0], b=domains[1])


def _sample_negatives(rng: Rng, n_items: int, exclude: set[int], n: int) -> np.ndarray:
    free = n_items - len(exclude)
    if free < n:
        raise SplitError(f"only {free} candidate negatives, need {n}")
    if free < 4 * n:
        pool = np.setdiff1d(np.arange(n_items), np.fromiter(exclude, dtype=np.int64))
        return np.sort(rng.choice(pool, size=n, replace=False)).astype(np.int32)
    chosen: list[int] = []
    seen = set(exclude)
    while len(chosen) < n:
        for c in rng.integers(0, n_items, size=2 * (n - len(chosen))).tolist():
            if c not in seen:
                seen.add(c)
                chosen.append(c)
                if len(chosen) == n:
                    break
    return np.sort(np.asarray(chosen, dtype=np.int32))


def loo_split(paired: PairedDataset, n_negatives: int = 99, rng: Rng | None = None, seed: int = 0) -> PairedDataset:
    """Reserve one validation and one test item per user and domain.

    Each user draws from its own child stream (split in user-row order), and
    validation and test negatives are two independent draws from the items the
    user never interacted with.  The result is stored; nothing is resampled
    later.
    """
    if rng is None:
        rng = Rng(seed)
    user_rngs = rng.spawn(paired.n_users)
    keep_users = []
    per_domain: list[dict[str, list]] = [
        {"rows": [], "val": [], "test": [], "val_neg": [], "test_neg": []} for _ in range(2)
    ]
    for u, urng in enumerate(user_rngs):
        rows = [d.row(u).indices for d in paired.domains]
        if min(r.size for r in rows) < 3:
            log.info("user %s dropped: fewer than 3 interactions in a domain", paired.users[u])
            continue
        keep_users.append(u)
        for k, d in enumerate(paired.domains):
            items = rows[k]
            val, test = urng.choice(items, size=2, replace=False).tolist()
            full = set(items.tolist())
            acc = per_domain[k]
            acc["rows"].append([i for i in items.tolist() if i not in (val, test)])
            acc["val"].append(val)
            acc["test"].append(test)
            acc["val_neg"].append(_sample_negatives(urng, d.n_items, full, n_negatives))
            acc["test_neg"].append(_sample_negatives(urng, d.n_items, full, n_negatives))
    if not keep_users:
        raise SplitError("no user survives the leave-one-out reservation")
    domains = []
    for k, d in enumerate(paired.domains):
        acc = per_domain[k]
        domains.append(
            DomainData(
                items=list(d.items),
                train=_csr_from_lists(acc["rows"], d.n_items),
                val_item=np.asarray(acc["val"], dtype=np.int32),
                test_item=np.asarray(acc["test"], dtype=np.int32),
                val_neg=np.stack(acc["val_neg"]).astype(np.int32),
                test_neg=np.stack(acc["test_neg"]).astype(np.int32),
            )
        )
    return PairedDataset(
        users=[paired.users[u] for u in keep_users],
        a=domains[0],
        b=domains[1],
        seed=paired.seed if paired.seed is not None else None,
        min_count=paired.min_count,
        n_negatives=n_negatives,
    )


def prepare(
    raw_a: RawRatings,
    raw_b: RawRatings,
    seed: int = 0,
    min_count: int = 5,
    n_negatives: int = 99,
    threshold: float = 3.0,
) -> PairedDataset:
    a = kcore_filter(binarize(raw_a, threshold), min_count)
    b = kcore_filter(binarize(raw_b, threshold), min_count)
    paired = pair_domains(a, b)
    paired.min_count = min_count
    ds = loo_split(paired, n_negatives=n_negatives, rng=Rng(seed))
    ds.seed = seed
    ds.min_count = min_count
    return ds


def subsample_train(ds: PairedDataset, ratio: float, rng: Rng) -> PairedDataset:
    """Keep a uniformly random ``ratio`` of each domain's train interactions.

    Validation/test items and negatives are untouched.  ``ratio == 1`` returns
    the dataset itself.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"train ratio must be in (0, 1], got {ratio}")
    if ratio == 1.0:
        return ds
    new = []
    for d in ds.domains:
        coo = d.train.tocoo()
        n_keep = int(round(ratio * coo.nnz))
        keep = np.sort(rng.choice(coo.nnz, size=n_keep, replace=False))
        train = sp.csr_matrix(
            (coo.data[keep], (coo.row[keep], coo.col[keep])), shape=d.train.shape, dtype=FLOAT
        )
        train.sort_indices()
        new.append(DomainData(d.items, train, d.val_item, d.test_item, d.val_neg, d.test_neg))
    return PairedDataset(ds.users, new[0], new[1], ds.seed, ds.min_count, ds.n_negatives)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def _write_manifest(path, fields: dict):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(DATASET_MAGIC + "\n")
        for k, v in fields.items():
            fh.write(f"{k} = {v}\n")


def _read_manifest(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != DATASET_MAGIC:
        raise FormatError(f"{path}: bad header magic")
    out = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed manifest line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_dataset(ds: PairedDataset, path) -> None:
    if not ds.is_split:
        raise ValueError("only split datasets can be saved")
    os.makedirs(path, exist_ok=True)
    fields = {
        "format_version": DATASET_VERSION,
        "seed": ds.seed if ds.seed is not None else "",
        "n_users": ds.n_users,
        "n_items_a": ds.a.n_items,
        "n_items_b": ds.b.n_items,
        "nnz_a": ds.a.train.nnz,
        "nnz_b": ds.b.train.nnz,
        "min_count": ds.min_count,
        "n_negatives": ds.n_negatives,
    }
    _write_manifest(os.path.join(path, "manifest"), fields)
    with open(os.path.join(path, "users.tsv"), "w", encoding="utf-8") as fh:
        for k, u in enumerate(ds.users):
            fh.write(f"{k}\t{u}\n")
    for name, d in zip(DOMAINS, ds.domains):
        with open(os.path.join(path, f"items_{name}.tsv"), "w", encoding="utf-8") as fh:
            for k, t in enumerate(d.items):
                fh.write(f"{k}\t{t}\n")
        with open(os.path.join(path, f"train_{name}.bin"), "wb") as fh:
            for u in range(ds.n_users):
                idx = d.train.indices[d.train.indptr[u] : d.train.indptr[u + 1]]
                fh.write(np.uint32(idx.size).astype("<u4").tobytes())
                fh.write(np.sort(idx).astype("<u4").tobytes())
        block = np.concatenate(
            [d.val_item[:, None], d.test_item[:, None], d.val_neg, d.test_neg], axis=1
        ).astype("<u4")
        with open(os.path.join(path, f"eval_{name}.bin"), "wb") as fh:
            fh.write(block.tobytes())


def _read_tsv(path) -> list[str]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh):
            idx, tok = line.rstrip("\n").split("\t", 1)
            if int(idx) != k:
                raise FormatError(f"{path}: index {idx} at line {k}")
            out.append(tok)
    return out


def load_dataset(path) -> PairedDataset:
    man = _read_manifest(os.path.join(path, "manifest"))
    try:
        version = int(man["format_version"])
    except (KeyError, ValueError):
        raise FormatError(f"{path}: manifest lacks a format_version") from None
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: dataset format {version}, expected {DATASET_VERSION}")
    users = _read_tsv(os.path.join(path, "users.tsv"))
    n_neg = int(man["n_negatives"])
    domains = []
    for name in DOMAINS:
        items = _read_tsv(os.path.join(path, f"items_{name}.tsv"))
        raw = np.fromfile(os.path.join(path, f"train_{name}.bin"), dtype="<u4")
        rows, pos = [], 0
        for _ in users:
            if pos >= raw.size:
                raise FormatError(f"{path}: truncated train_{name}.bin")
            n = int(raw[pos])
            rows.append(raw[pos + 1 : pos + 1 + n].astype(np.int32))
            pos += 1 + n
        if pos != raw.size:
            raise FormatError(f"{path}: trailing data in train_{name}.bin")
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([r.size for r in rows])
        indices = np.concatenate(rows) if rows else np.zeros(0, np.int32)
        train = sp.csr_matrix(
            (np.ones(indices.size, dtype=FLOAT), indices, indptr), shape=(len(users), len(items))
        )
        block = np.fromfile(os.path.join(path, f"eval_{name}.bin"), dtype="<u4")
        width = 2 + 2 * n_neg
        if block.size != len(users) * width:
            raise FormatError(f"{path}: eval_{name}.bin has {block.size} words, expected {len(users) * width}")
        block = block.reshape(len(users), width).astype(np.int32)
        domains.append(
            DomainData(
                items=items,
                train=train,
                val_item=block[:, 0].copy(),
                test_item=block[:, 1].copy(),
                val_neg=block[:, 2 : 2 + n_neg].copy(),
                test_neg=block[:, 2 + n_neg :].copy(),
            )
        )
    seed = man.get("seed", "")
    return PairedDataset(
        users=users,
        a=domains[0],
        b=domains[1],
        seed=int(seed) if seed else None,
        min_count=int(man.get("min_count", 5)),
        n_negatives=n_neg,
    )


def dataset_hash(ds: PairedDataset) -> str:
    """Content hash over users, items, train rows and the eval block."""
    h = hashlib.sha256()
    h.update("\n".join(ds.users).encode())
    for d in ds.domains:
        h.update(b"\x00" + "\n".join(d.items).encode())
        h.update(d.train.indptr.astype("<i8").tobytes())
        h.update(d.train.indices.astype("<i4").tobytes())
        if d.val_item is not None:
            for arr in (d.val_item, d.test_item, d.val_neg, d.test_neg):
                h.update(np.ascontiguousarray(arr, dtype="<i4").tobytes())
    return h.hexdigest()


def directory_hash(path) -> str:
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if os.path.isfile(full):
            h.update(name.encode() + b"\x00")
            with open(full, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def density_pct(n_inter: int, n_users: int, n_items: int) -> float:
    return 100.0 * n_inter / (n_users * n_items) if n_users and n_items else math.nan
