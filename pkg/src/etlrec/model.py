"""The dual auto-encoder with a latent transformation between domains.

Domain ``a`` plays the role of X and ``b`` of Y.  A latent code moves from
``b`` to ``a`` through the "to_a" map and from ``a`` to ``b`` through the
"to_b" map.  For the orthogonal variant (``trans5``) a single matrix ``W`` is
shared: ``to_a(z) = z @ W`` and ``to_b(z) = z @ W.T``.
"""
from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, InvalidShapeError
from .numerics import FLOAT, Mlp2Params, Rng, mlp2_forward, sigmoid, xavier_init

TRANSFORM_KINDS = ("trans1", "trans2", "trans3", "trans4", "trans5")
CONSTRAINED_KINDS = ("trans3", "trans4", "trans5")
PRIOR_KINDS = ("gaussian", "laplace", "uniform", "mvgaussian")
PENALTY_NORMS = ("l1", "fro")


def _map_steps(kind: str, target: str) -> list[tuple]:
    if kind in ("trans1", "trans3"):
        return [("lin", f"w_to_{target}", False)]
    if kind in ("trans2", "trans4"):
        return [("lin", f"w1_to_{target}", False), ("relu",), ("lin", f"w2_to_{target}", False)]
    if kind == "trans5":
        return [("lin", "w", target == "b")]
    raise ConfigError(f"unknown transform kind {kind!r}")


def _target_of(direction: str) -> str:
    if direction in ("a->b", "a2b"):
        return "b"
    if direction in ("b->a", "b2a"):
        return "a"
    raise ConfigError(f"unknown transform direction {direction!r}")


@dataclass
class TransformSpec:
    kind: str
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")
        shapes = {a.shape for a in self.params.values()}
        if len(shapes) > 1 or any(len(s) != 2 or s[0] != s[1] for s in shapes):
            raise InvalidShapeError(f"transform matrices must all be d x d, got {shapes}")

    @staticmethod
    def param_names(kind: str) -> list[str]:
        names = []
        for target in ("a", "b"):
            for step in _map_steps(kind, target):
                if step[0] == "lin" and step[1] not in names:
                    names.append(step[1])
        return names

    @classmethod
    def init(cls, kind: str, d: int, rng: Rng, dtype=FLOAT) -> "TransformSpec":
        return cls(kind, {name: xavier_init(d, d, rng, dtype) for name in cls.param_names(kind)})

    @property
    def constrained(self) -> bool:
        return self.kind in CONSTRAINED_KINDS


def _apply_map(z: np.ndarray, steps, params):
    cache = []
    for step in steps:
        cache.append((step, z))
        if step[0] == "lin":
            w = params[step[1]]
            z = z @ (w.T if step[2] else w)
        else:
            z = np.maximum(z, 0)
    return z, cache


def _map_backward(cache, g: np.ndarray, params, grads: dict) -> np.ndarray:
    for step, z_in in reversed(cache):
        if step[0] == "lin":
            w = params[step[1]]
            gw = z_in.T @ g
            if step[2]:
                gw = gw.T
            grads[step[1]] = grads.get(step[1], 0) + gw
            g = g @ (w if step[2] else w.T)
        else:
            g = g * (z_in > 0)
    return g


def transform(z: np.ndarray, spec: TransformSpec, direction: str, return_cache: bool = False):
    """Move latent codes across domains (``direction`` is ``"a->b"`` or ``"b->a"``)."""
    d = next(iter(spec.params.values())).shape[0]
    if z.ndim != 2 or z.shape[1] != d:
        raise InvalidShapeError(f"latent batch {z.shape} does not match transform dim {d}")
    out, cache = _apply_map(z, _map_steps(spec.kind, _target_of(direction)), spec.params)
    return (out, cache) if return_cache else out


def transform_backward(cache, g: np.ndarray, spec: TransformSpec, grads: dict) -> np.ndarray:
    """Accumulate parameter grads into ``grads``; return dL/dz."""
    return _map_backward(cache, g, spec.params, grads)


def _row_norm_and_grad(r: np.ndarray, norm: str):
    b = r.shape[0]
    if norm == "l1":
        val = np.abs(r).sum(dtype=np.float64) / b
        g = np.sign(r) / b
    elif norm == "fro":
        rn = np.sqrt(np.square(r, dtype=np.float64).sum(axis=1))
        val = rn.sum() / b
        safe = np.where(rn > 0, rn, 1.0)
        g = np.where(rn[:, None] > 0, r / safe[:, None], 0.0) / b
    else:
        raise ConfigError(f"unknown penalty norm {norm!r}")
    return float(val), g.astype(r.dtype, copy=False)


def transform_penalty_grad(z_a: np.ndarray, z_b: np.ndarray, spec: TransformSpec, norm: str = "l1"):
    """Cycle-consistency penalty and its gradients.

    Returns ``(value, dz_a, dz_b, param_grads)``.  For the orthogonal kind
    this is mean_rows |z_a - z_a W^T W|_1 + mean_rows |z_b - z_b W W^T|_1.
    Unconstrained kinds contribute nothing.
    """
    if z_a.shape[1] != z_b.shape[1]:
        raise InvalidShapeError(f"latent widths differ: {z_a.shape} vs {z_b.shape}")
    grads: dict[str, np.ndarray] = {}
    if not spec.constrained:
        return 0.0, np.zeros_like(z_a), np.zeros_like(z_b), grads
    total = 0.0
    dz = []
    for z, first, second in ((z_a, "a->b", "b->a"), (z_b, "b->a", "a->b")):
        mid, c1 = transform(z, spec, first, return_cache=True)
        back, c2 = transform(mid, spec, second, return_cache=True)
        val, g = _row_norm_and_grad(z - back, norm)
        total += val
        g_mid = transform_backward(c2, -g, spec, grads)
        dz.append(g + transform_backward(c1, g_mid, spec, grads))
    return total, dz[0], dz[1], grads


def transform_penalty(z_a: np.ndarray, z_b: np.ndarray, spec: TransformSpec, norm: str = "l1") -> float:
    return transform_penalty_grad(z_a, z_b, spec, norm)[0]


def orthogonality_error(spec: TransformSpec) -> float:
    """mean |W^T W - I| over the d x d entries (trans5 only)."""
    w = spec.params["w"].astype(np.float64)
    return float(np.abs(w.T @ w - np.eye(w.shape[0])).mean())


def reorthogonalize(spec: TransformSpec) -> None:
    """Snap the shared matrix to the nearest-by-QR orthogonal matrix in place."""
    if spec.kind != "trans5":
        return
    q, r = np.linalg.qr(spec.params["w"].astype(np.float64))
    q *= np.where(np.diag(r) < 0, -1.0, 1.0)
    spec.params["w"][...] = q.astype(spec.params["w"].dtype)


PARTS = ("enc_a", "enc_b", "dec_a", "dec_b", "disc_a", "disc_b")


@dataclass
class EtlModel:
    enc_a: Mlp2Params
    enc_b: Mlp2Params
    dec_a: Mlp2Params
    dec_b: Mlp2Params
    transform: TransformSpec
    disc_a: Mlp2Params
    disc_b: Mlp2Params
    dropout: float = 0.5

    def __post_init__(self):
        d = self.enc_a.out_dim
        dims = [self.enc_b.out_dim, self.dec_a.in_dim, self.dec_b.in_dim, self.disc_a.in_dim, self.disc_b.in_dim]
        if any(x != d for x in dims):
            raise InvalidShapeError(f"inconsistent latent dims {[d] + dims}")
        if self.dec_a.out_dim != self.enc_a.in_dim or self.dec_b.out_dim != self.enc_b.in_dim:
            raise InvalidShapeError("decoder outputs must match item counts")
        if self.disc_a.out_dim != 1 or self.disc_b.out_dim != 1:
            raise InvalidShapeError("discriminators must emit one logit")
        for a in self.transform.params.values():
            if a.shape != (d, d):
                raise InvalidShapeError(f"transform matrix {a.shape} vs latent dim {d}")

    @classmethod
    def init(
        cls,
        n_items_a: int,
        n_items_b: int,
        latent_dim: int = 200,
        hidden: int = 400,
        disc_hidden: int = 100,
        transform_kind: str = "trans5",
        rng: Rng | None = None,
        dropout: float = 0.5,
        dtype=FLOAT,
    ) -> "EtlModel":
        rng = rng if rng is not None else Rng(0)
        r = rng.spawn(7)
        return cls(
            enc_a=Mlp2Params.init(n_items_a, hidden, latent_dim, r[0], dtype),
            enc_b=Mlp2Params.init(n_items_b, hidden, latent_dim, r[1], dtype),
            dec_a=Mlp2Params.init(latent_dim, hidden, n_items_a, r[2], dtype),
            dec_b=Mlp2Params.init(latent_dim, hidden, n_items_b, r[3], dtype),
            transform=TransformSpec.init(transform_kind, latent_dim, r[4], dtype),
            disc_a=Mlp2Params.init(latent_dim, disc_hidden, 1, r[5], dtype),
            disc_b=Mlp2Params.init(latent_dim, disc_hidden, 1, r[6], dtype),
            dropout=dropout,
        )

    @property
    def latent_dim(self) -> int:
        return self.enc_a.out_dim

    @property
    def n_items(self) -> tuple[int, int]:
        return self.enc_a.in_dim, self.enc_b.in_dim

    def part(self, name: str) -> Mlp2Params:
        return getattr(self, name)

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable tensor."""
        out = {}
        for p in PARTS:
            for n, a in self.part(p).items():
                out[f"{p}.{n}"] = a
        for n, a in self.transform.params.items():
            out[f"transform.{self.transform.kind}.{n}"] = a
        return out

    def copy(self) -> "EtlModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "EtlModel":
        return EtlModel(
            *(self.part(p).astype(dtype) for p in ("enc_a", "enc_b", "dec_a", "dec_b")),
            TransformSpec(self.transform.kind, {k: v.astype(dtype) for k, v in self.transform.params.items()}),
            self.disc_a.astype(dtype),
            self.disc_b.astype(dtype),
            dropout=self.dropout,
        )

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], dropout: float = 0.5) -> "EtlModel":
        parts = {}
        for p in PARTS:
            try:
                parts[p] = Mlp2Params(*(tensors[f"{p}.{n}"] for n in ("w1", "b1", "w2", "b2")))
            except KeyError as e:
                raise FormatError(f"checkpoint lacks tensor {e.args[0]}") from None
        tparams = {}
        kind = None
        for name, a in tensors.items():
            if name.startswith("transform."):
                _, kind, pname = name.split(".", 2)
                tparams[pname] = a
        if kind is None:
            raise FormatError("checkpoint lacks transform tensors")
        return cls(transform=TransformSpec(kind, tparams), dropout=dropout, **parts)


def _check_domain(which: str) -> str:
    if which not in ("a", "b"):
        raise ValueError(f"unknown domain {which!r}")
    return which


def encode(rows, which: str, model: EtlModel, training: bool = False, rng: Rng | None = None, return_trace=False):
    """Deterministic encoder (dropout on the hidden layer only while training)."""
    enc = model.part(f"enc_{_check_domain(which)}")
    if rows.ndim != 2 or rows.shape[1] != enc.in_dim:
        raise InvalidShapeError(f"rows {rows.shape} do not match domain {which} with {enc.in_dim} items")
    z, trace = mlp2_forward(rows, enc, model.dropout, training, rng)
    return (z, trace) if return_trace else z


def decode(z: np.ndarray, which: str, model: EtlModel, return_trace=False):
    """Item logits; sigmoid is left to the loss or the caller."""
    dec = model.part(f"dec_{_check_domain(which)}")
    if z.ndim != 2 or z.shape[1] != dec.in_dim:
        raise InvalidShapeError(f"latent batch {z.shape} vs latent dim {dec.in_dim}")
    logits, trace = mlp2_forward(z, dec)
    return (logits, trace) if return_trace else logits


def disc_logits(z: np.ndarray, which: str, model: EtlModel, training: bool = False, rng: Rng | None = None):
    disc = model.part(f"disc_{_check_domain(which)}")
    if z.ndim != 2 or z.shape[1] != disc.in_dim:
        raise InvalidShapeError(f"latent batch {z.shape} vs latent dim {disc.in_dim}")
    return mlp2_forward(z, disc, model.dropout, training, rng)


def discriminate(z: np.ndarray, which: str, model: EtlModel, training: bool = False, rng: Rng | None = None):
    """Probability that each latent row came from the prior."""
    logits, _ = disc_logits(z, which, model, training, rng)
    return sigmoid(logits[:, 0])


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "gaussian"
    dim: int = 200

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ConfigError(f"unknown prior {self.kind!r}")


def sample_prior(spec: PriorSpec, n: int, rng: Rng, dtype=FLOAT) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one sample")
    shape = (n, spec.dim)
    if spec.kind == "gaussian":
        s = rng.normal(0.0, 1.0, shape)
    elif spec.kind == "laplace":
        s = rng.laplace(0.0, 1.0, shape)
    elif spec.kind == "uniform":
        s = rng.uniform(0.0, 1.0, shape)
    elif spec.kind == "mvgaussian":
        s = rng.normal(0.0, 1.0, shape) + rng.normal(3.0, 1.0, shape)
    else:  # pragma: no cover - guarded by PriorSpec
        raise ConfigError(f"unknown prior {spec.kind!r}")
    return s.astype(dtype)


# ---------------------------------------------------------------------------
# ETL1 checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ETL1"


def config_hash(fields: dict) -> int:
    """Stable u32 digest of the shape-defining settings."""
    text = "\n".join(f"{k}={fields[k]}" for k in sorted(fields))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


def save_checkpoint(model: EtlModel, path, cfg_hash: int = 0) -> None:
    tensors = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, a in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", cfg_hash & 0xFFFFFFFF))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an ETL1 checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        if pos + 4 * n > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(FLOAT)
        pos += 4 * n
    (cfg_hash,) = take("<I")
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return tensors, cfg_hash
