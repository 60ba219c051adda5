"""Losses, gradients and the alternating training loop.

One batch step does three things, in order:

1. reconstruction: within-domain and cross-domain decoding plus the
   cycle penalty, updating encoders, decoders and the transform;
2. discriminator: prior samples labelled real, encoded batch labelled fake;
3. generator: encoders pushed to make the discriminators call them real.

``ablation="etl-jrl"`` runs step 1 only; ``ablation="aae++"`` drops the
cross-domain terms and the penalty from step 1.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .config import TrainConfig
from .dataio import PairedDataset
from .errors import TrainingDivergedError
from .evaluation import mean_val_ndcg
from .model import (
    EtlModel,
    PriorSpec,
    decode,
    disc_logits,
    encode,
    reorthogonalize,
    sample_prior,
    transform,
    transform_backward,
    transform_penalty_grad,
)
from .numerics import AdamState, Rng, adam_update, bce_loss, mlp2_backward

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,jrl,penalty,disc,gen,val_ndcg10_a,val_ndcg10_b,ms"


def _add_part_grads(grads: dict, part: str, pairs) -> None:
    for name, g in pairs:
        key = f"{part}.{name}"
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g


def _dense(rows):
    return rows.toarray() if sp.issparse(rows) else np.asarray(rows)


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} is not finite ({value})", param=what)


@dataclass
class JrlResult:
    loss: float
    terms: dict[str, float]
    grads: dict[str, np.ndarray]


def jrl_loss(
    x,
    y,
    model: EtlModel,
    lam: float,
    training: bool = True,
    rng: Rng | None = None,
    ablation: str = "full-etl",
    norm: str = "l1",
) -> JrlResult:
    """Joint reconstruction loss and gradients for encoders, decoders, transform.

    Each reconstruction term is a whole-row binary cross entropy (summed over
    items, averaged over the batch).  ``terms`` holds the individual pieces:
    ``aa``/``bb`` within-domain, ``ba`` (b decoded in a) / ``ab`` cross-domain,
    and the unweighted ``penalty``.
    """
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y must hold the same users")
    za, tr_a = encode(x, "a", model, training, rng, return_trace=True)
    zb, tr_b = encode(y, "b", model, training, rng, return_trace=True)
    xt, yt = _dense(x), _dense(y)
    grads: dict[str, np.ndarray] = {}
    gza = np.zeros_like(za)
    gzb = np.zeros_like(zb)

    def recon(z, which, target):
        logits, tr = decode(z, which, model, return_trace=True)
        loss, g = bce_loss(logits, target, reduction="row_sum")
        pg, gz = mlp2_backward(tr, g)
        _add_part_grads(grads, f"dec_{which}", pg.items())
        return loss, gz

    terms = {}
    terms["aa"], g = recon(za, "a", xt)
    gza += g
    terms["bb"], g = recon(zb, "b", yt)
    gzb += g
    total = terms["aa"] + terms["bb"]

    if ablation != "aae++":
        spec = model.transform
        tgrads: dict[str, np.ndarray] = {}
        z_ba, cache = transform(zb, spec, "b->a", return_cache=True)
        terms["ba"], g = recon(z_ba, "a", xt)
        gzb += transform_backward(cache, g, spec, tgrads)
        z_ab, cache = transform(za, spec, "a->b", return_cache=True)
        terms["ab"], g = recon(z_ab, "b", yt)
        gza += transform_backward(cache, g, spec, tgrads)
        pen, pa, pb, pg = transform_penalty_grad(za, zb, spec, norm)
        terms["penalty"] = pen
        total += terms["ba"] + terms["ab"] + lam * pen
        if lam and spec.constrained:
            gza += lam * pa
            gzb += lam * pb
            for k, v in pg.items():
                tgrads[k] = tgrads.get(k, 0) + lam * v
        for k, v in tgrads.items():
            grads[f"transform.{spec.kind}.{k}"] = v.astype(spec.params[k].dtype, copy=False)

    _check_finite(total, "jrl loss")
    _add_part_grads(grads, "enc_a", mlp2_backward(tr_a, gza, need_input_grad=False)[0].items())
    _add_part_grads(grads, "enc_b", mlp2_backward(tr_b, gzb, need_input_grad=False)[0].items())
    return JrlResult(total, terms, grads)


def prl_discriminator_step(
    z_a: np.ndarray,
    z_b: np.ndarray,
    prior_a: np.ndarray,
    prior_b: np.ndarray,
    model: EtlModel,
    training: bool = True,
    rng: Rng | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Discriminator loss (prior -> 1, encoded -> 0, both domains) and its grads."""
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    for which, z, prior in (("a", z_a, prior_a), ("b", z_b, prior_b)):
        for batch, label in ((prior, 1.0), (z, 0.0)):
            logits, tr = disc_logits(batch, which, model, training, rng)
            loss, g = bce_loss(logits, np.full(logits.shape, label, dtype=logits.dtype))
            total += loss
            _add_part_grads(grads, f"disc_{which}", mlp2_backward(tr, g, need_input_grad=False)[0].items())
    _check_finite(total, "discriminator loss")
    return total, grads


def prl_generator_step(
    x, y, model: EtlModel, eta: float, training: bool = True, rng: Rng | None = None
) -> tuple[float, dict[str, np.ndarray]]:
    """eta * (-mean log D_a(E_a(x)) - mean log D_b(E_b(y))); grads for encoders only."""
    grads: dict[str, np.ndarray] = {}
    if eta == 0:
        for part in ("enc_a", "enc_b"):
            for name, a in model.part(part).items():
                grads[f"{part}.{name}"] = np.zeros_like(a)
        return 0.0, grads
    total = 0.0
    for which, rows in (("a", x), ("b", y)):
        z, tr_e = encode(rows, which, model, training, rng, return_trace=True)
        logits, tr_d = disc_logits(z, which, model, training, rng)
        loss, g = bce_loss(logits, np.ones(logits.shape, dtype=logits.dtype))
        total += eta * loss
        _, gz = mlp2_backward(tr_d, eta * g)
        _add_part_grads(grads, f"enc_{which}", mlp2_backward(tr_e, gz, need_input_grad=False)[0].items())
    _check_finite(total, "generator loss")
    return total, grads


@dataclass
class Optimizers:
    """Adam states: ``ae`` (encoders, decoders, transform), ``disc``, and
    ``gen`` (used only when ``gen_optimizer == "separate"``)."""

    ae: AdamState = field(default_factory=AdamState)
    disc: AdamState = field(default_factory=AdamState)
    gen: AdamState = field(default_factory=AdamState)
    batches: int = 0


@dataclass
class EpochStats:
    epoch: int
    jrl: float
    penalty: float
    disc: float
    gen: float
    total: float
    ms: int
    n_batches: int = 0
    val_ndcg10_a: float = float("nan")
    val_ndcg10_b: float = float("nan")

    def csv_line(self) -> str:
        return (
            f"{self.epoch},{self.jrl:.6f},{self.penalty:.6f},{self.disc:.6f},{self.gen:.6f},"
            f"{self.val_ndcg10_a:.6f},{self.val_ndcg10_b:.6f},{self.ms}"
        )


def train_epoch(
    ds: PairedDataset, model: EtlModel, opt: Optimizers, cfg: TrainConfig, rng: Rng, epoch: int = 0
) -> EpochStats:
    t0 = time.perf_counter()
    params = model.parameters()
    prior = PriorSpec(cfg.prior, model.latent_dim)
    adam = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    adversarial = cfg.ablation != "etl-jrl"
    order = rng.permutation(ds.n_users)
    sums = np.zeros(4, dtype=np.float64)
    n_batches = 0
    for lo in range(0, ds.n_users, cfg.batch_size):
        idx = order[lo : lo + cfg.batch_size]
        x, y = ds.a.train[idx], ds.b.train[idx]
        res = jrl_loss(x, y, model, cfg.lam, True, rng, cfg.ablation, cfg.penalty_norm)
        adam_update(params, res.grads, opt.ae, **adam)
        disc_loss = gen_raw = 0.0
        if adversarial:
            for _ in range(cfg.disc_steps):
                za = encode(x, "a", model, True, rng)
                zb = encode(y, "b", model, True, rng)
                pa = sample_prior(prior, len(idx), rng, za.dtype)
                pb = sample_prior(prior, len(idx), rng, zb.dtype)
                disc_loss, dg = prl_discriminator_step(za, zb, pa, pb, model, True, rng)
                adam_update(params, dg, opt.disc, **adam)
            if cfg.eta > 0:
                gen_loss, gg = prl_generator_step(x, y, model, cfg.eta, True, rng)
                gen_state = opt.ae if cfg.gen_optimizer == "shared" else opt.gen
                adam_update(params, gg, gen_state, **adam)
                gen_raw = gen_loss / cfg.eta
        n_batches += 1
        opt.batches += 1
        if cfg.reortho_every and opt.batches % cfg.reortho_every == 0:
            reorthogonalize(model.transform)
        sums += (res.loss, res.terms.get("penalty", 0.0), disc_loss, gen_raw)
    means = sums / max(n_batches, 1)
    return EpochStats(
        epoch=epoch,
        jrl=float(means[0]),
        penalty=float(means[1]),
        disc=float(means[2]),
        gen=float(means[3]),
        total=float(means[0] + cfg.eta * means[3]),
        ms=int(round(1000 * (time.perf_counter() - t0))),
        n_batches=n_batches,
    )


@dataclass
class FitResult:
    model: EtlModel
    best_epoch: int
    best_val: float
    log: list[EpochStats]
    final_model: EtlModel | None = None


def build_model(ds: PairedDataset, cfg: TrainConfig, rng: Rng) -> EtlModel:
    return EtlModel.init(
        ds.a.n_items,
        ds.b.n_items,
        latent_dim=cfg.latent_dim,
        hidden=cfg.hidden,
        disc_hidden=cfg.disc_hidden,
        transform_kind=cfg.transform,
        rng=rng,
        dropout=cfg.dropout,
    )


def fit(ds: PairedDataset, cfg: TrainConfig, on_epoch=None, model: EtlModel | None = None) -> FitResult:
    """Train for ``cfg.epochs`` and keep the checkpoint with the best mean
    validation NDCG@10 over both domains (the untrained model is the first
    candidate, so ``epochs=0`` returns it)."""
    init_rng, train_rng = Rng(cfg.seed).spawn(2)
    if model is None:
        model = build_model(ds, cfg, init_rng)
    opt = Optimizers()
    best = model.copy()
    best_val = float(np.mean(mean_val_ndcg(model, ds)))
    best_epoch = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        stats = train_epoch(ds, model, opt, cfg, train_rng, epoch)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            stats.val_ndcg10_a, stats.val_ndcg10_b = mean_val_ndcg(model, ds)
            score = 0.5 * (stats.val_ndcg10_a + stats.val_ndcg10_b)
            if score > best_val:
                best, best_val, best_epoch = model.copy(), score, epoch
        history.append(stats)
        log.debug("epoch %d: %s", epoch, stats.csv_line())
        if on_epoch is not None:
            on_epoch(stats)
    return FitResult(best, best_epoch, best_val, history, final_model=model)


def write_log(history: list[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        for s in history:
            fh.write(s.csv_line() + "\n")
