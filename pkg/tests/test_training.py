import math

import numpy as np
import pytest
import scipy.sparse as sp

from etlrec.config import TrainConfig
from etlrec.dataio import DomainData, PairedDataset
from etlrec.errors import TrainingDivergedError
from etlrec.model import TRANSFORM_KINDS, EtlModel, discriminate, encode, transform_penalty
from etlrec.numerics import Rng
from etlrec.synth import generate, random_rotation
from etlrec.training import (
    LOG_HEADER,
    Optimizers,
    fit,
    jrl_loss,
    prl_discriminator_step,
    prl_generator_step,
    train_epoch,
    write_log,
)

from gradcheck import Toy, check_objective, smooth_toys

TOL = 1e-3
ENC_DEC = {f"{p}.{n}" for p in ("enc_a", "enc_b", "dec_a", "dec_b") for n in ("w1", "b1", "w2", "b2")}


@pytest.fixture(scope="module")
def tiny():
    ds, _ = generate(120, 40, 30, 3, 2, sparsity=0.8, seed=1, n_negatives=10)
    return ds


def tiny_cfg(**kw):
    base = dict(latent_dim=4, hidden=8, disc_hidden=4, batch_size=32, epochs=2, lr=0.01)
    base.update(kw)
    return TrainConfig(**base)


class TestJrlGradients:
    @pytest.mark.parametrize("kind", TRANSFORM_KINDS)
    def test_every_parameter(self, kind):
        for toy in smooth_toys(3, kind):
            errors = check_objective(toy, "jrl", lam=0.7)
            expected = ENC_DEC | {f"transform.{kind}.{n}" for n in toy.model.transform.params}
            assert set(errors) == expected
            assert max(errors.values()) < TOL, errors

    def test_frobenius_penalty(self):
        for toy in smooth_toys(3, "trans5"):
            errors = check_objective(toy, "jrl", lam=2.0, norm="fro")
            assert max(errors.values()) < TOL, errors

    def test_aae_ablation_gradients(self):
        for toy in smooth_toys(2, "trans5"):
            errors = check_objective(toy, "jrl", ablation="aae++")
            assert set(errors) == ENC_DEC
            assert max(errors.values()) < TOL

    def test_float32_model_against_float64_oracle(self):
        toy = smooth_toys(1, "trans5", start=50)[0]
        exact = toy.jrl().grads
        m32 = toy.model.astype(np.float32)
        res32 = jrl_loss(toy.x.astype(np.float32), toy.y.astype(np.float32), m32, 1.0, True, toy.rng())
        for name, g in exact.items():
            g32 = res32.grads[name].astype(np.float64)
            assert np.linalg.norm(g32 - g) <= TOL * max(np.linalg.norm(g), 1e-12), name


class TestJrlValues:
    def test_rigged_decoders_near_zero(self):
        toy = Toy(0, "trans5")
        m = toy.model
        m.transform.params["w"][...] = random_rotation(3, Rng(1))
        for part in ("dec_a", "dec_b"):
            p = m.part(part)
            p.w2[...] = 0
            p.w1[...] = 0
            p.b1[...] = 0
        # constant decoder output cannot depend on the user, so use one user
        one = Toy(0, "trans5")
        one.x = sp.csr_matrix(np.array([[1, 0, 1, 1, 0, 1]], dtype=np.float64))
        one.y = sp.csr_matrix(np.array([[0, 1, 1, 0, 1]], dtype=np.float64))
        one.model = m
        m.dec_a.b2[...] = 40 * (2 * one.x.toarray()[0] - 1)
        m.dec_b.b2[...] = 40 * (2 * one.y.toarray()[0] - 1)
        assert one.jrl(lam=1.0).loss < 1e-3

    def test_lambda_zero_is_bce_sum(self):
        toy = Toy(3, "trans5")
        res = toy.jrl(lam=0.0)
        t = res.terms
        assert res.loss == pytest.approx(t["aa"] + t["bb"] + t["ab"] + t["ba"], rel=1e-12)
        assert t["penalty"] > 0

    def test_terms_recomputed(self):
        toy = Toy(4, "trans5")
        res = toy.jrl(lam=0.5)
        za, zb = toy.latents()
        pen = transform_penalty(za, zb, toy.model.transform)
        assert res.terms["penalty"] == pytest.approx(pen, rel=1e-12)
        total = sum(res.terms[k] for k in ("aa", "bb", "ab", "ba")) + 0.5 * pen
        assert res.loss == pytest.approx(total, rel=1e-12)

    def test_nonfinite_raises(self):
        toy = Toy(5, "trans5")
        toy.model.dec_a.w2[0, 0] = np.nan
        with pytest.raises(TrainingDivergedError):
            toy.jrl()

    def test_aae_instrumented(self, monkeypatch):
        import etlrec.training as tr

        calls = {"transform": 0, "penalty": 0}

        def counting(name, fn):
            def inner(*a, **kw):
                calls[name] += 1
                return fn(*a, **kw)

            return inner

        monkeypatch.setattr(tr, "transform", counting("transform", tr.transform))
        monkeypatch.setattr(tr, "transform_penalty_grad", counting("penalty", tr.transform_penalty_grad))
        toy = Toy(6, "trans5")
        res = toy.jrl(ablation="aae++")
        assert calls == {"transform": 0, "penalty": 0}
        assert set(res.terms) == {"aa", "bb"}
        assert res.loss == res.terms["aa"] + res.terms["bb"]


class TestPrl:
    def test_disc_gradients(self):
        for toy in smooth_toys(3):
            errors = check_objective(toy, "disc")
            assert set(errors) == {f"disc_{w}.{n}" for w in "ab" for n in ("w1", "b1", "w2", "b2")}
            assert max(errors.values()) < TOL

    @pytest.mark.parametrize("eta", [1.0, 0.3])
    def test_gen_gradients(self, eta):
        for toy in smooth_toys(3):
            errors = check_objective(toy, "gen", eta=eta)
            assert set(errors) == {f"enc_{w}.{n}" for w in "ab" for n in ("w1", "b1", "w2", "b2")}
            assert max(errors.values()) < TOL

    def _half(self, toy):
        for w in "ab":
            for a in toy.model.part(f"disc_{w}").arrays():
                a[...] = 0

    def test_disc_at_half(self):
        toy = Toy(0)
        self._half(toy)
        loss, _ = toy.disc()
        assert loss == pytest.approx(4 * math.log(2), abs=1e-12)

    def test_gen_at_half(self):
        toy = Toy(0)
        self._half(toy)
        assert toy.gen(eta=0.7)[0] == pytest.approx(0.7 * 2 * math.log(2), abs=1e-12)

    def test_perfect_discriminator(self):
        # logit = 10 * relu(sum z) - 20: +130 on the prior cloud, -20 on the encoded one
        toy = Toy(1)
        m = toy.model
        for w in "ab":
            d = m.part(f"disc_{w}")
            for a in d.arrays():
                a[...] = 0
            d.w1[:, 0] = 1.0
            d.w2[0, 0] = 10.0
            d.b2[0] = -20.0
        prior = np.full((4, 3), 5.0)
        fake = np.full((4, 3), -5.0)
        loss, _ = prl_discriminator_step(fake, fake, prior, prior, m, training=False)
        assert loss < 1e-8

    def test_eta_zero(self):
        toy = Toy(2)
        loss, grads = toy.gen(eta=0.0)
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grads.values())

    def test_disc_descent(self):
        toy = smooth_toys(1, start=10)[0]
        za, zb = toy.latents()
        m = toy.model
        before, g = prl_discriminator_step(za, zb, toy.prior_a, toy.prior_b, m, training=False)
        params = m.parameters()
        for k, v in g.items():
            params[k] -= 1e-3 * v
        after, _ = prl_discriminator_step(za, zb, toy.prior_a, toy.prior_b, m, training=False)
        assert after < before

    def test_gen_ascent_of_d(self):
        toy = smooth_toys(1, start=20)[0]
        m = toy.model
        mean_d = lambda: discriminate(encode(toy.x, "a", m), "a", m).mean() + discriminate(encode(toy.y, "b", m), "b", m).mean()
        before = mean_d()
        _, g = prl_generator_step(toy.x, toy.y, m, 1.0, training=False)
        params = m.parameters()
        for k, v in g.items():
            params[k] -= 1e-3 * v
        assert mean_d() > before


class TestTrainEpoch:
    def test_batch_count(self, tiny):
        stats = train_epoch(tiny, EtlModel.init(tiny.a.n_items, tiny.b.n_items, 4, 8, 4, rng=Rng(0)), Optimizers(), tiny_cfg(batch_size=7), Rng(1))
        assert stats.n_batches == math.ceil(tiny.n_users / 7)

    def test_objective_accounting(self, tiny):
        cfg = tiny_cfg(eta=0.4)
        s = train_epoch(tiny, EtlModel.init(tiny.a.n_items, tiny.b.n_items, 4, 8, 4, rng=Rng(0)), Optimizers(), cfg, Rng(1))
        assert s.total == pytest.approx(s.jrl + 0.4 * s.gen, abs=1e-5)
        for v in (s.jrl, s.penalty, s.disc, s.gen):
            assert math.isfinite(v)

    def test_etl_jrl_freezes_discriminators(self, tiny):
        cfg = tiny_cfg(ablation="etl-jrl", epochs=5)
        m = EtlModel.init(tiny.a.n_items, tiny.b.n_items, 4, 8, 4, rng=Rng(0))
        frozen = {k: v.copy() for k, v in m.parameters().items() if k.startswith("disc_")}
        res = fit(tiny, cfg, model=m)
        for k, v in frozen.items():
            assert np.array_equal(res.final_model.parameters()[k], v)
            assert res.final_model.parameters()[k].tobytes() == v.tobytes()
        assert all(s.disc == 0 and s.gen == 0 for s in res.log)

    def test_full_etl_moves_discriminators(self, tiny):
        m = EtlModel.init(tiny.a.n_items, tiny.b.n_items, 4, 8, 4, rng=Rng(0))
        before = m.disc_a.w1.copy()
        res = fit(tiny, tiny_cfg(epochs=1), model=m)
        assert not np.array_equal(res.final_model.disc_a.w1, before)

    def test_plain_autoencoder_loss_decreases(self):
        # one domain duplicated, eta = lam = 0: ordinary auto-encoder training
        ds, _ = generate(150, 40, 40, 3, 0, sparsity=0.8, seed=2, n_negatives=10)
        twin = PairedDataset(ds.users, ds.a, DomainData(ds.a.items, ds.a.train, ds.a.val_item, ds.a.test_item, ds.a.val_neg, ds.a.test_neg))
        res = fit(twin, tiny_cfg(epochs=10, lam=0.0, eta=0.0, ablation="aae++"))
        losses = [s.jrl for s in res.log]
        assert losses[-1] < losses[0]

    def test_determinism(self, tiny):
        a = fit(tiny, tiny_cfg(epochs=3, seed=4))
        b = fit(tiny, tiny_cfg(epochs=3, seed=4))
        strip = lambda log: [s.csv_line().rsplit(",", 1)[0] for s in log]
        assert strip(a.log) == strip(b.log)
        for k, v in a.model.parameters().items():
            assert v.tobytes() == b.model.parameters()[k].tobytes()

    def test_gen_optimizer_modes_differ(self, tiny):
        a = fit(tiny, tiny_cfg(epochs=1, gen_optimizer="shared"))
        b = fit(tiny, tiny_cfg(epochs=1, gen_optimizer="separate"))
        assert not np.array_equal(a.final_model.enc_a.w1, b.final_model.enc_a.w1)

    def test_reorthogonalize_schedule(self, tiny):
        from etlrec.model import orthogonality_error

        res = fit(tiny, tiny_cfg(epochs=1, batch_size=len(tiny.users), reortho_every=1))
        assert orthogonality_error(res.final_model.transform) < 1e-5


class TestFit:
    def test_zero_epochs_returns_init(self, tiny):
        cfg = tiny_cfg(epochs=0, seed=9)
        res = fit(tiny, cfg)
        init = EtlModel.init(tiny.a.n_items, tiny.b.n_items, 4, 8, 4, rng=Rng(9).spawn(2)[0])
        assert res.best_epoch == 0 and res.log == []
        for k, v in init.parameters().items():
            assert np.array_equal(res.model.parameters()[k], v)

    def test_best_not_worse_than_start(self, tiny):
        res = fit(tiny, tiny_cfg(epochs=4))
        start = fit(tiny, tiny_cfg(epochs=0))
        assert res.best_val >= start.best_val

    def test_write_log(self, tiny, tmp_path):
        res = fit(tiny, tiny_cfg(epochs=2))
        write_log(res.log, tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == LOG_HEADER
        assert len(lines) == 3
        assert all(len(line.split(",")) == 8 for line in lines)
