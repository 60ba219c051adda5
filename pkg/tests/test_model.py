import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from etlrec.errors import ConfigError, FormatError, InvalidShapeError
from etlrec.model import (
    TRANSFORM_KINDS,
    EtlModel,
    PriorSpec,
    TransformSpec,
    config_hash,
    decode,
    discriminate,
    encode,
    load_checkpoint,
    orthogonality_error,
    reorthogonalize,
    sample_prior,
    save_checkpoint,
    transform,
    transform_penalty,
)
from etlrec.numerics import AdamState, Mlp2Params, Rng, adam_update, bce_loss, mlp2_backward
from etlrec.synth import random_rotation


def small_model(kind="trans5", d=4, seed=0, dtype=np.float64, **kw):
    return EtlModel.init(7, 5, latent_dim=d, hidden=6, disc_hidden=3, transform_kind=kind, rng=Rng(seed), dtype=dtype, **kw)


def zero_biases(m: EtlModel):
    for name, a in m.parameters().items():
        if name.endswith(".b1") or name.endswith(".b2"):
            a[...] = 0


class TestEncodeDecode:
    def test_zero_row_gives_zero_latent(self):
        m = small_model()
        zero_biases(m)
        z = encode(sp.csr_matrix((2, 7)), "a", m)
        assert np.array_equal(z, np.zeros((2, 4)))

    def test_eval_mode_deterministic(self):
        m = small_model()
        x = sp.random(5, 7, density=0.4, format="csr", random_state=1)
        assert np.array_equal(encode(x, "a", m), encode(x, "a", m))
        z = np.ones((3, 4))
        assert np.array_equal(decode(z, "b", m), decode(z, "b", m))

    def test_training_mode_uses_dropout(self):
        m = small_model()
        x = np.ones((50, 7))
        z1 = encode(x, "a", m, training=True, rng=Rng(1))
        z2 = encode(x, "a", m, training=True, rng=Rng(2))
        assert not np.array_equal(z1, z2)

    def test_hand_trace(self):
        # 3 items, hidden 2, d = 2
        enc = Mlp2Params(
            np.array([[1.0, -1.0], [0.5, 2.0], [0.0, 1.0]]),
            np.array([0.0, -0.5]),
            np.array([[1.0, 0.0], [2.0, -1.0]]),
            np.array([0.1, 0.2]),
        )
        dec = Mlp2Params(np.eye(2), np.zeros(2), np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]), np.zeros(3))
        disc = Mlp2Params(np.ones((2, 1)), np.zeros(1), np.ones((1, 1)), np.zeros(1))
        m = EtlModel(enc, enc, dec, dec, TransformSpec("trans5", {"w": np.eye(2)}), disc, disc)
        x = np.array([[1.0, 1.0, 0.0]])
        # hidden pre = [1.5, 0.5], relu same; out = [1.5 + 1.0 + 0.1, -0.5 + 0.2]
        z = encode(x, "a", m)
        assert np.allclose(z, [[2.6, -0.3]])
        # decode: relu(z) = [2.6, 0]; logits = [2.6, 0, 2.6]
        assert np.allclose(decode(z, "a", m), [[2.6, 0.0, 2.6]])

    def test_shape_errors(self):
        m = small_model()
        with pytest.raises(InvalidShapeError):
            encode(np.zeros((2, 5)), "a", m)
        with pytest.raises(InvalidShapeError):
            decode(np.zeros((2, 3)), "a", m)
        with pytest.raises(InvalidShapeError):
            discriminate(np.zeros((2, 3)), "b", m)

    def test_shape_closure_all_paths(self):
        m = small_model()
        x = sp.random(3, 7, density=0.5, format="csr", random_state=0)
        y = sp.random(3, 5, density=0.5, format="csr", random_state=1)
        za, zb = encode(x, "a", m), encode(y, "b", m)
        assert decode(za, "a", m).shape == (3, 7)
        assert decode(zb, "b", m).shape == (3, 5)
        assert decode(transform(zb, m.transform, "b->a"), "a", m).shape == (3, 7)
        assert decode(transform(za, m.transform, "a->b"), "b", m).shape == (3, 5)


class TestTransform:
    def test_identity(self):
        z = Rng(0).normal(size=(5, 3))
        spec = TransformSpec("trans5", {"w": np.eye(3)})
        assert np.array_equal(transform(z, spec, "a->b"), z)
        assert np.array_equal(transform(z, spec, "b->a"), z)

    def test_trans1_swap(self):
        swap = np.array([[0.0, 1.0], [1.0, 0.0]])
        spec = TransformSpec("trans1", {"w_to_a": swap, "w_to_b": swap})
        assert np.array_equal(transform(np.array([[1.0, 2.0]]), spec, "a->b"), [[2.0, 1.0]])

    def test_trans5_directions(self):
        w = Rng(1).normal(size=(3, 3))
        z = Rng(2).normal(size=(4, 3))
        spec = TransformSpec("trans5", {"w": w})
        assert np.allclose(transform(z, spec, "b->a"), z @ w)
        assert np.allclose(transform(z, spec, "a->b"), z @ w.T)

    def test_trans2_relu(self):
        w1 = np.array([[1.0, -1.0], [0.0, 1.0]])
        w2 = np.eye(2)
        spec = TransformSpec("trans2", {"w1_to_a": w1, "w2_to_a": w2, "w1_to_b": w1, "w2_to_b": w2})
        assert np.allclose(transform(np.array([[1.0, 0.0]]), spec, "a->b"), [[1.0, 0.0]])

    @pytest.mark.parametrize("seed", range(5))
    def test_rotation_preserves_inner_products(self, seed):
        d = 8
        w = random_rotation(d, Rng(seed)).astype(np.float32)
        z = Rng(seed + 100).normal(size=(16, d)).astype(np.float32)
        spec = TransformSpec("trans5", {"w": w})
        for direction in ("a->b", "b->a"):
            t = transform(z, spec, direction)
            g0 = z.astype(np.float64) @ z.T.astype(np.float64)
            g1 = t.astype(np.float64) @ t.T.astype(np.float64)
            assert np.allclose(g1, g0, atol=1e-5 * np.abs(g0).max())

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            TransformSpec("trans9", {})
        with pytest.raises(ConfigError):
            transform(np.zeros((1, 2)), TransformSpec("trans5", {"w": np.eye(2)}), "sideways")

    def test_non_square_rejected(self):
        with pytest.raises(InvalidShapeError):
            TransformSpec("trans5", {"w": np.zeros((2, 3))})

    @pytest.mark.parametrize("kind", TRANSFORM_KINDS)
    def test_param_names(self, kind):
        spec = TransformSpec.init(kind, 3, Rng(0))
        expected = {
            "trans1": ["w_to_a", "w_to_b"],
            "trans3": ["w_to_a", "w_to_b"],
            "trans2": ["w1_to_a", "w2_to_a", "w1_to_b", "w2_to_b"],
            "trans4": ["w1_to_a", "w2_to_a", "w1_to_b", "w2_to_b"],
            "trans5": ["w"],
        }[kind]
        assert sorted(spec.params) == sorted(expected)


class TestPenalty:
    def test_orthogonal_zero(self):
        w = random_rotation(6, Rng(3))
        z = Rng(4).normal(size=(10, 6))
        assert transform_penalty(z, z[::-1].copy(), TransformSpec("trans5", {"w": w})) < 1e-4

    def test_zero_matrix(self):
        za = Rng(0).normal(size=(5, 3))
        zb = Rng(1).normal(size=(5, 3))
        got = transform_penalty(za, zb, TransformSpec("trans5", {"w": np.zeros((3, 3))}))
        want = np.abs(za).sum(1).mean() + np.abs(zb).sum(1).mean()
        assert got == pytest.approx(want, rel=1e-12)

    def test_trans3_inverse_pair(self):
        w = Rng(5).normal(size=(4, 4)) + 4 * np.eye(4)
        spec = TransformSpec("trans3", {"w_to_b": w, "w_to_a": np.linalg.inv(w)})
        z = Rng(6).normal(size=(7, 4))
        assert transform_penalty(z, z, spec) < 1e-9

    @pytest.mark.parametrize("kind", ["trans1", "trans2"])
    def test_unconstrained_zero(self, kind):
        spec = TransformSpec.init(kind, 3, Rng(0))
        z = Rng(1).normal(size=(4, 3))
        assert transform_penalty(z, z, spec) == 0.0

    def test_trans5_matches_closed_form(self):
        w = Rng(7).normal(size=(3, 3))
        za = Rng(8).normal(size=(6, 3))
        zb = Rng(9).normal(size=(6, 3))
        want = np.abs(za - za @ w.T @ w).sum(1).mean() + np.abs(zb - zb @ w @ w.T).sum(1).mean()
        assert transform_penalty(za, zb, TransformSpec("trans5", {"w": w})) == pytest.approx(want, rel=1e-12)

    def test_full_rank_batch_links_penalty_and_orthogonality(self):
        # on a full-rank batch the penalty vanishes exactly when W^T W = I
        z = Rng(10).normal(size=(20, 4))
        q = random_rotation(4, Rng(11))
        near = q + 0.05 * Rng(12).normal(size=(4, 4))
        far = q + 0.5 * Rng(12).normal(size=(4, 4))
        p = [transform_penalty(z, z, TransformSpec("trans5", {"w": w})) for w in (q, near, far)]
        o = [orthogonality_error(TransformSpec("trans5", {"w": w})) for w in (q, near, far)]
        assert p[0] < 1e-9 and o[0] < 1e-12
        assert p[0] < p[1] < p[2] and o[0] < o[1] < o[2]

    def test_reorthogonalize(self):
        spec = TransformSpec("trans5", {"w": Rng(0).normal(size=(5, 5))})
        reorthogonalize(spec)
        assert orthogonality_error(spec) < 1e-12


class TestDegeneration:
    def test_identity_transform_is_shared_representation(self):
        m = small_model(kind="trans5")
        m.transform.params["w"][...] = np.eye(4)
        y = sp.random(3, 5, density=0.6, format="csr", random_state=2)
        zb = encode(y, "b", m)
        assert np.array_equal(decode(transform(zb, m.transform, "b->a"), "a", m), decode(zb, "a", m))


class TestDiscriminate:
    def test_zero_weights_half(self):
        m = small_model()
        for a in m.disc_a.arrays():
            a[...] = 0
        assert np.array_equal(discriminate(Rng(0).normal(size=(4, 4)), "a", m), np.full(4, 0.5))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-5, 5), st.integers(0, 1000))
    def test_open_interval(self, scale, seed):
        m = small_model()
        p = discriminate(scale * Rng(seed).normal(size=(8, 4)), "b", m)
        assert np.all((p > 0) & (p < 1))

    def test_separates_clusters(self):
        m = small_model(d=2, dtype=np.float32)
        rng = Rng(3)
        pos = rng.normal(3.0, 0.5, (200, 2)).astype(np.float32)
        neg = rng.normal(-3.0, 0.5, (200, 2)).astype(np.float32)
        x = np.concatenate([pos, neg])
        y = np.concatenate([np.ones(200), np.zeros(200)]).astype(np.float32)[:, None]
        flat = {f"d.{k}": v for k, v in m.disc_a.items()}
        state = AdamState()
        from etlrec.model import disc_logits

        for _ in range(200):
            logits, tr = disc_logits(x, "a", m)
            _, g = bce_loss(logits, y)
            grads, _ = mlp2_backward(tr, g, need_input_grad=False)
            adam_update(flat, {f"d.{k}": v for k, v in grads.items()}, state, lr=0.01)
        acc = ((discriminate(x, "a", m) > 0.5) == (y[:, 0] > 0.5)).mean()
        assert acc > 0.9


class TestPriors:
    def test_uniform_support(self):
        s = sample_prior(PriorSpec("uniform", 10), 1000, Rng(0))
        assert s.min() >= 0 and s.max() < 1

    @pytest.mark.parametrize(
        "kind,mean,var",
        [("gaussian", 0.0, 1.0), ("mvgaussian", 3.0, 2.0), ("laplace", 0.0, 2.0), ("uniform", 0.5, 1 / 12)],
    )
    def test_moments(self, kind, mean, var):
        s = sample_prior(PriorSpec(kind, 100), 1000, Rng(1)).astype(np.float64)
        assert abs(s.mean() - mean) <= 3 * np.sqrt(var / s.size)
        assert abs(s.var() / var - 1) < 0.05

    def test_unknown(self):
        with pytest.raises(ConfigError):
            PriorSpec("cauchy", 3)

    def test_shape_and_dtype(self):
        s = sample_prior(PriorSpec("laplace", 7), 3, Rng(0))
        assert s.shape == (3, 7) and s.dtype == np.float32


class TestCheckpoint:
    @pytest.mark.parametrize("kind", TRANSFORM_KINDS)
    def test_roundtrip(self, tmp_path, kind):
        m = small_model(kind=kind, dtype=np.float32)
        h = config_hash({"kind": kind, "d": 4})
        save_checkpoint(m, tmp_path / "m.etl1", h)
        tensors, got_hash = load_checkpoint(tmp_path / "m.etl1")
        assert got_hash == h
        back = EtlModel.from_tensors(tensors)
        for name, a in m.parameters().items():
            assert np.array_equal(back.parameters()[name], a)

    def test_layout(self, tmp_path):
        m = small_model(dtype=np.float32)
        save_checkpoint(m, tmp_path / "m.etl1", 0xDEADBEEF)
        raw = (tmp_path / "m.etl1").read_bytes()
        assert raw[:4] == b"ETL1"
        assert int.from_bytes(raw[4:8], "little") == len(m.parameters())
        assert int.from_bytes(raw[-4:], "little") == 0xDEADBEEF
        nlen = int.from_bytes(raw[8:12], "little")
        assert raw[12 : 12 + nlen] == b"enc_a.w1"

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.etl1"
        p.write_bytes(b"ETL2" + b"\0" * 8)
        with pytest.raises(FormatError):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        m = small_model(dtype=np.float32)
        save_checkpoint(m, tmp_path / "m.etl1")
        raw = (tmp_path / "m.etl1").read_bytes()
        (tmp_path / "t.etl1").write_bytes(raw[:-10])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t.etl1")

    def test_hash_stable_and_sensitive(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})
