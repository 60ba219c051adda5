"""Small deterministic numerical kernel.

Dense matrices are plain numpy arrays (float32 for model parameters), sparse
behaviour rows are scipy CSR matrices.  Everything here is a pure function of
its inputs and an explicit :class:`Rng`; there is no global random state.

The backward passes are written by hand.  They are dtype-generic: feeding
float64 parameters runs the same code in double precision, which is what the
finite-difference checks in the test-suite rely on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import InvalidShapeError, TrainingDivergedError

FLOAT = np.float32


class Rng:
    """Seeded, splittable random stream.

    ``split`` spawns children from the underlying ``SeedSequence``; spawning
    does not advance the parent's own stream, so a child's output never
    depends on how much the parent is used afterwards (and vice versa).
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
        else:
            self._ss = np.random.SeedSequence(int(seed))
        self.gen = np.random.Generator(np.random.PCG64(self._ss))

    def split(self) -> "Rng":
        return Rng(self._ss.spawn(1)[0])

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng(s) for s in self._ss.spawn(n)]

    def random(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self.gen.normal(loc, scale, size)

    def laplace(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self.gen.laplace(loc, scale, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size)

    def permutation(self, n) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True) -> np.ndarray:
        return self.gen.choice(a, size=size, replace=replace)


@dataclass(frozen=True)
class SparseRow:
    """One implicit-feedback behaviour vector."""

    dim: int
    indices: np.ndarray
    values: np.ndarray | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.dim):
            raise InvalidShapeError("sparse row indices must be strictly increasing and < dim")
        vals = np.ones(idx.size, dtype=FLOAT) if self.values is None else np.asarray(self.values, dtype=FLOAT)
        if vals.shape != idx.shape or not np.all(np.isfinite(vals)):
            raise InvalidShapeError("sparse row values must be finite and match indices")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=FLOAT)
        out[self.indices] = self.values
        return out


def rows_to_csr(rows: list[SparseRow], dim: int | None = None) -> sp.csr_matrix:
    if dim is None:
        if not rows:
            raise InvalidShapeError("cannot infer width of an empty row list")
        dim = rows[0].dim
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    for i, r in enumerate(rows):
        if r.dim != dim:
            raise InvalidShapeError(f"row {i} has dim {r.dim}, expected {dim}")
        indptr[i + 1] = indptr[i] + r.indices.size
    indices = np.concatenate([r.indices for r in rows]) if rows else np.zeros(0, np.int64)
    values = np.concatenate([r.values for r in rows]) if rows else np.zeros(0, FLOAT)
    return sp.csr_matrix((values, indices, indptr), shape=(len(rows), dim))


def xavier_init(rows: int, cols: int, rng: Rng, dtype=FLOAT) -> np.ndarray:
    """Glorot-uniform matrix on [-a, a] with a = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise InvalidShapeError(f"xavier_init needs positive dims, got {rows}x{cols}")
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols)).astype(dtype)


@dataclass
class Mlp2Params:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if (
            self.w1.ndim != 2
            or self.w2.ndim != 2
            or self.b1.shape != (self.w1.shape[1],)
            or self.w2.shape[0] != self.w1.shape[1]
            or self.b2.shape != (self.w2.shape[1],)
        ):
            raise InvalidShapeError(
                f"inconsistent MLP shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )

    @classmethod
    def init(cls, n_in: int, hidden: int, n_out: int, rng: Rng, dtype=FLOAT) -> "Mlp2Params":
        return cls(
            w1=xavier_init(n_in, hidden, rng, dtype),
            b1=np.zeros(hidden, dtype=dtype),
            w2=xavier_init(hidden, n_out, rng, dtype),
            b2=np.zeros(n_out, dtype=dtype),
        )

    @classmethod
    def zeros_like(cls, other: "Mlp2Params") -> "Mlp2Params":
        return cls(*(np.zeros_like(a) for a in other.arrays()))

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return self.w1, self.b1, self.w2, self.b2

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from zip(("w1", "b1", "w2", "b2"), self.arrays())

    def astype(self, dtype) -> "Mlp2Params":
        return Mlp2Params(*(a.astype(dtype) for a in self.arrays()))


@dataclass
class Mlp2Trace:
    params: Mlp2Params
    x: np.ndarray | sp.spmatrix
    pre1: np.ndarray
    mask: np.ndarray | None
    h: np.ndarray
    out: np.ndarray
    out_act: str


def mlp2_forward(
    x,
    params: Mlp2Params,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: Rng | None = None,
    out_act: str = "identity",
) -> tuple[np.ndarray, Mlp2Trace]:
    """relu hidden layer with inverted dropout, then a linear (or sigmoid) head.

    Sparse inputs only touch the nonzero rows of ``w1``.
    """
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError(f"dropout_p must be in [0, 1), got {dropout_p}")
    if out_act not in ("identity", "sigmoid"):
        raise ValueError(f"unknown output activation {out_act!r}")
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise InvalidShapeError(f"input shape {x.shape} does not match w1 {params.w1.shape}")
    if sp.issparse(x):
        pre1 = np.asarray(x @ params.w1) + params.b1
    else:
        x = np.asarray(x)
        pre1 = x @ params.w1 + params.b1
    h = np.maximum(pre1, 0)
    mask = None
    if training and dropout_p > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = 1.0 - dropout_p
        mask = ((rng.random(h.shape) < keep) / keep).astype(h.dtype)
        h = h * mask
    pre2 = h @ params.w2 + params.b2
    out = expit(pre2) if out_act == "sigmoid" else pre2
    return out, Mlp2Trace(params, x, pre1, mask, h, out, out_act)


def mlp2_backward(
    trace: Mlp2Trace, upstream: np.ndarray, need_input_grad: bool = True
) -> tuple[Mlp2Params, np.ndarray | None]:
    """Gradients of a scalar loss given dL/d(output).

    Returns parameter gradients and dL/d(input); the latter is ``None`` for
    sparse inputs or when ``need_input_grad`` is false.
    """
    if upstream.shape != trace.out.shape:
        raise InvalidShapeError(f"upstream grad {upstream.shape} vs output {trace.out.shape}")
    p = trace.params
    g2 = upstream
    if trace.out_act == "sigmoid":
        g2 = g2 * trace.out * (1.0 - trace.out)
    gw2 = trace.h.T @ g2
    gb2 = g2.sum(axis=0, dtype=np.float64).astype(p.b2.dtype)
    gh = g2 @ p.w2.T
    if trace.mask is not None:
        gh = gh * trace.mask
    g1 = gh * (trace.pre1 > 0)
    if sp.issparse(trace.x):
        gw1 = np.asarray(trace.x.T @ g1)
        gx = None
    else:
        gw1 = trace.x.T @ g1
        gx = g1 @ p.w1.T if need_input_grad else None
    gb1 = g1.sum(axis=0, dtype=np.float64).astype(p.b1.dtype)
    grads = Mlp2Params(gw1.astype(p.w1.dtype, copy=False), gb1, gw2.astype(p.w2.dtype, copy=False), gb2)
    return grads, gx


def bce_loss(logits, targets, reduction: str = "mean") -> tuple[float, np.ndarray]:
    """Binary cross entropy on logits, in the overflow-free form.

    ``reduction="mean"`` averages over every entry; ``"row_sum"`` sums each
    row (a whole behaviour vector) and averages over rows.  The returned
    gradient is with respect to the logits.
    """
    logits = np.asarray(logits)
    if sp.issparse(targets):
        targets = targets.toarray()
    targets = np.asarray(targets, dtype=logits.dtype)
    if logits.shape != targets.shape:
        raise InvalidShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    if logits.size == 0:
        raise InvalidShapeError("empty batch")
    per_entry = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    if reduction == "mean":
        denom = logits.size
    elif reduction == "row_sum":
        denom = logits.shape[0]
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    loss = float(per_entry.sum(dtype=np.float64) / denom)
    grad = (expit(logits) - targets) / denom
    return loss, grad.astype(logits.dtype, copy=False)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam step, in place on ``params``.

    Moments are kept in float64.  All gradients are checked before any
    parameter is touched, so a divergence leaves the model intact.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise InvalidShapeError(f"{name}: grad {g.shape} vs param {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name}", param=name)
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g, dtype=np.float64)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return state


def l1_norm(a) -> float:
    return float(np.abs(np.asarray(a)).sum(dtype=np.float64))


def l1_subgrad(a) -> np.ndarray:
    # sign(0) == 0
    return np.sign(a)


def frobenius_norm(a) -> float:
    return float(np.sqrt(np.square(np.asarray(a), dtype=np.float64).sum()))


def sigmoid(x):
    return expit(x)
