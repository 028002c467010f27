import math

import numpy as np
import pytest

from metassm import ndcompute as nd
from metassm.errors import DimensionError, NumericError, UsageError
from metassm.inference import (
    EncoderConfig, Encoders, EmbeddingEncoderParams, StateEncoderParams, aggregate, dvbf_elbo, dvbf_terms,
    elbo, elbo_terms, embedding_per_trial, infer_embedding, infer_states, objective, vsmc_bound,
    vsmc_objective, vsmc_terms,
)
from metassm.ndcompute import GaussianDiag, Tensor
from metassm.ndcompute.check import gradcheck
from metassm.ssm import GenerativeModel, ModelConfig, embedding_prior, rollout_mean, softplus_inv

from oracles import kalman_lml, linear_model, rts_smoother, simulate_linear


def _toy(variant="lowrank", d_e=2, direction="bi", rng_seed=0, n_ds=2, T=5):
    rng = np.random.default_rng(rng_seed)
    m = GenerativeModel.create(ModelConfig(d_z=2, d_e=d_e, d_ybar=3, variant=variant, hidden=(5, 4),
                                           hyper_hidden=(3,), read_in_hidden=(4,)), rng)
    batches = {}
    for i in range(n_ds):
        d_y = 4 + i
        m.register(f"d{i}", d_y, rng)
        batches[f"d{i}"] = rng.normal(size=(3, T, d_y))
    enc = Encoders.create(m, EncoderConfig(embed_hidden=3, state_hidden=4, state_direction=direction), rng)
    return m, enc, batches


class TestEmbeddingEncoder:
    def test_identical_trials(self):
        rng = np.random.default_rng(0)
        enc = EmbeddingEncoderParams.init(3, 4, 2, rng)
        one = rng.normal(size=(1, 6, 3))
        single = embedding_per_trial(enc, one)
        agg = infer_embedding(enc, np.repeat(one, 5, axis=0))
        np.testing.assert_allclose(agg.mean.data, single.mean.data[0], atol=1e-15)
        np.testing.assert_allclose(agg.var.data, single.var.data[0], atol=1e-15)

    def test_two_trial_average(self):
        rng = np.random.default_rng(1)
        enc = EmbeddingEncoderParams.init(3, 4, 2, rng)
        y = rng.normal(size=(2, 6, 3))
        per = embedding_per_trial(enc, y)
        agg = aggregate(per)
        np.testing.assert_allclose(agg.mean.data, (per.mean.data[0] + per.mean.data[1]) / 2)
        np.testing.assert_allclose(agg.var.data, (per.var.data[0] + per.var.data[1]) / 2)

    def test_empty_batch(self):
        enc = EmbeddingEncoderParams.init(3, 4, 2, np.random.default_rng(0))
        with pytest.raises(UsageError):
            infer_embedding(enc, np.zeros((0, 5, 3)))

    def test_bidirectional_option(self):
        rng = np.random.default_rng(2)
        enc = EmbeddingEncoderParams.init(3, 4, 1, rng, bidirectional=True)
        assert enc.head_W.shape == (8, 2)
        assert infer_embedding(enc, rng.normal(size=(2, 5, 3))).shape == (1,)

    def test_head_size(self):
        enc = EmbeddingEncoderParams.init(3, 16, 2, np.random.default_rng(0))
        assert enc.head_W.shape == (16, 4)


class TestStateEncoder:
    @pytest.mark.parametrize("direction", ["bi", "forward", "backward"])
    def test_shapes(self, direction):
        rng = np.random.default_rng(0)
        enc = StateEncoderParams.init(5, 4, 2, rng, direction)
        q = infer_states(enc, rng.normal(size=(3, 7, 3)), np.ones(2))
        assert q.mean.shape == (3, 7, 2) and q.var.shape == (3, 7, 2)
        assert np.all(q.var.data > 0)

    def test_single_step(self):
        rng = np.random.default_rng(1)
        enc = StateEncoderParams.init(4, 3, 2, rng)
        assert infer_states(enc, rng.normal(size=(1, 1, 3)), [0.5]).shape == (1, 1, 2)

    def test_dimension_mismatch(self):
        enc = StateEncoderParams.init(5, 4, 2, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            infer_states(enc, np.zeros((1, 3, 3)), np.zeros(3))

    def test_per_trial_embeddings(self):
        rng = np.random.default_rng(2)
        enc = StateEncoderParams.init(4, 3, 2, rng)
        y = rng.normal(size=(2, 4, 3))
        e = np.array([[0.1], [-0.4]])
        both = infer_states(enc, y, e).mean.data
        first = infer_states(enc, y[:1], e[0]).mean.data
        np.testing.assert_allclose(both[:1], first, atol=1e-14)

    def test_backward_sees_only_future(self):
        rng = np.random.default_rng(3)
        enc = StateEncoderParams.init(4, 3, 2, rng, "backward")
        y = rng.normal(size=(1, 6, 3))
        y2 = y.copy()
        y2[:, :2] += 5.0
        a = infer_states(enc, y, [0.0]).mean.data
        b = infer_states(enc, y2, [0.0]).mean.data
        np.testing.assert_array_equal(a[:, 2:], b[:, 2:])


@pytest.mark.parametrize("direction", ["bi", "backward"])
def test_encoder_gradients_T3(direction):
    rng = np.random.default_rng(5)
    emb = EmbeddingEncoderParams.init(3, 4, 2, rng)
    st = StateEncoderParams.init(5, 4, 2, rng, direction)
    y = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)

    def f():
        q_e = infer_embedding(emb, y)
        q = infer_states(st, y, q_e.mean)
        return nd.sum_(nd.square(q.mean)) + nd.sum_(nd.log(q.var)) + nd.sum_(nd.log(q_e.var))

    params = [y] + list(emb.tensors().values()) + list(st.tensors().values())
    assert gradcheck(f, params, h=1e-4) < 1e-6


class TestElboStructure:
    def test_report_identity(self):
        m, enc, b = _toy()
        r = elbo(m, enc, b, np.random.default_rng(0), lam=0.3)
        f = r.as_floats()
        assert f["total"] == pytest.approx(f["recon"] - f["kl_state"] - f["kl_embed"] - 0.3 * f["penalty"],
                                           rel=1e-12)
        assert set(r.per_dataset) == {"d0", "d1"}
        assert r.trials == 6
        assert sum(p.recon.item() for p in r.per_dataset.values()) == pytest.approx(f["recon"], rel=1e-12)

    def test_penalty_zero_at_init(self):
        m, enc, b = _toy()
        r = elbo(m, enc, b, np.random.default_rng(0), lam=0.0)
        assert r.penalty.item() == 0.0

    def test_determinism(self):
        m, enc, b = _toy()
        for tag in ("dkf", "vsmc"):
            a = objective(tag, m, enc, b, np.random.default_rng(7)).total.item()
            c = objective(tag, m, enc, b, np.random.default_rng(7)).total.item()
            assert a == c

    def test_encoders_shared_across_datasets(self):
        m, enc, b = _toy()
        ids = {id(t) for t in enc.tensors().values()}
        seen = []
        with nd.Tape() as tape:
            r = elbo(m, enc, b, np.random.default_rng(0))
        tape.backward(r.total)
        for t in enc.tensors().values():
            seen.append(id(t))
            assert t.grad is not None
        assert set(seen) == ids
        assert not any(k.startswith("datasets/") for k in enc.tensors())

    def test_embedding_kl_zero_when_pinned(self):
        m, enc, b = _toy()
        enc.embedding.head_W.data[...] = 0.0
        d_e = m.d_e
        enc.embedding.head_b.data[:d_e] = 0.0
        enc.embedding.head_b.data[d_e:] = softplus_inv(1.0 - 1e-6)
        r = elbo(m, enc, b, np.random.default_rng(0))
        assert abs(r.kl_embed.item()) < 1e-12

    def test_embed_kl_switch(self):
        m, enc, b = _toy()
        a = elbo(m, enc, b, np.random.default_rng(0), embed_kl="batch").kl_embed.item()
        t = elbo(m, enc, b, np.random.default_rng(0), embed_kl="trial").kl_embed.item()
        assert t == pytest.approx(3 * a, rel=1e-12)

    def test_nan_fails_fast(self):
        m, enc, b = _toy()
        b["d0"][0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            elbo(m, enc, b, np.random.default_rng(0))

    def test_gradcheck_full_elbo(self):
        m, enc, b = _toy(T=3)
        for W, bias in m.dynamics.hypernet.layers:
            W.data[...] = np.random.default_rng(1).normal(scale=0.3, size=W.shape)
        params = list(m.tensors().values()) + list(enc.tensors().values())
        f = lambda: elbo(m, enc, b, np.random.default_rng(3), lam=0.1).total
        assert gradcheck(f, params, h=1e-4) < 1e-5

    def test_unknown_objective(self):
        m, enc, b = _toy()
        with pytest.raises(ValueError):
            objective("nope", m, enc, b, np.random.default_rng(0))


A, Q, C, R = 0.8, 0.3, 1.2, 0.5


def _shared_prior():
    return embedding_prior(1), Tensor(np.zeros(1))


class TestKalmanOracle:
    def test_oracle_self_consistency(self):
        # LML via the filter equals the joint Gaussian density of y
        rng = np.random.default_rng(0)
        _, y = simulate_linear(rng, 6, A, Q, C, R)
        T = len(y)
        cov_z = np.zeros((T, T))
        var = [1.0]
        for t in range(1, T):
            var.append(A * A * var[-1] + Q)
        for s in range(T):
            for t in range(s, T):
                cov_z[s, t] = cov_z[t, s] = A ** (t - s) * var[s]
        cov_y = C * C * cov_z + R * np.eye(T)
        sign, logdet = np.linalg.slogdet(cov_y)
        want = -0.5 * (logdet + y @ np.linalg.solve(cov_y, y) + T * math.log(2 * math.pi))
        assert kalman_lml(y, A, Q, C, R) == pytest.approx(want, rel=1e-12)

    def test_linear_dynamics_exact(self):
        m = linear_model(A, Q, C, R)
        z = np.linspace(-3, 3, 13).reshape(-1, 1)
        np.testing.assert_allclose(rollout_mean(m, z, 1)[:, 0], A * z, atol=1e-15)

    def _posterior_at_zero_a(self, y):
        # with a = 0 every z_t is independent a posteriori
        prior_var = np.r_[1.0, np.full(len(y) - 1, Q)]
        post_var = 1.0 / (1.0 / prior_var + C * C / R)
        return post_var * C * y / R, post_var

    def test_elbo_equals_lml_when_posterior_factorizes(self):
        rng = np.random.default_rng(1)
        _, y = simulate_linear(rng, 8, 0.0, Q, C, R)
        m = linear_model(0.0, Q, C, R)
        mean, var = self._posterior_at_zero_a(y)
        q_z = GaussianDiag(mean.reshape(1, -1, 1), var.reshape(1, -1, 1))
        q_e, e = _shared_prior()
        lml = kalman_lml(y, 0.0, Q, C, R)
        Y = y.reshape(1, -1, 1)
        vals = np.array([elbo_terms(m, "lin", Y, q_e, e, q_z, rng.standard_normal((1, 8, 1)),
                                    analytic_kl=True).total.item() for _ in range(10_000)])
        se = vals.std(ddof=1) / math.sqrt(len(vals))
        assert abs(vals.mean() - lml) < 3 * se
        exact = elbo_terms(m, "lin", Y, q_e, e, q_z, rng.standard_normal((1, 8, 1)), analytic_kl=False)
        assert exact.total.item() == pytest.approx(lml, abs=1e-10)

    def _smoothed_setup(self, seed=2, T=10):
        rng = np.random.default_rng(seed)
        _, y = simulate_linear(rng, T, A, Q, C, R)
        m = linear_model(A, Q, C, R)
        ms, ps = rts_smoother(y, A, Q, C, R)
        q_z = GaussianDiag(ms.reshape(1, -1, 1), ps.reshape(1, -1, 1))
        return rng, y.reshape(1, -1, 1), m, q_z, kalman_lml(y, A, Q, C, R)

    def test_elbo_below_lml(self):
        rng, Y, m, q_z, lml = self._smoothed_setup()
        q_e, e = _shared_prior()
        T = Y.shape[1]
        vals = np.array([elbo_terms(m, "lin", Y, q_e, e, q_z, rng.standard_normal((1, T, 1))).total.item()
                         for _ in range(2000)])
        se = vals.std(ddof=1) / math.sqrt(len(vals))
        assert vals.mean() <= lml + 3 * se
        assert vals.mean() < lml - 0.05  # correlated posterior: the gap is real

    def test_vsmc_bounds_and_monotonicity(self):
        rng, Y, m, q_z, lml = self._smoothed_setup()
        q_e, e = _shared_prior()
        T = Y.shape[1]
        means = []
        for N in (1, 4, 16):
            vals = np.array([vsmc_terms(m, "lin", Y, q_e, e, q_z, rng.standard_normal((1, N, T, 1)),
                                        lam=0.0).total.item() for _ in range(1000)])
            se = vals.std(ddof=1) / math.sqrt(len(vals))
            assert vals.mean() <= lml + 3 * se, (N, vals.mean(), lml, se)
            means.append(vals.mean())
        assert means[0] <= means[1] <= means[2]

    def test_vsmc_single_particle_equals_elbo(self):
        rng, Y, m, q_z, _ = self._smoothed_setup()
        q_e, e = _shared_prior()
        T = Y.shape[1]
        for _ in range(5):
            eps = rng.standard_normal((1, T, 1))
            a = elbo_terms(m, "lin", Y, q_e, e, q_z, eps, lam=0.0, analytic_kl=False).total.item()
            b = vsmc_terms(m, "lin", Y, q_e, e, q_z, eps.reshape(1, 1, T, 1), lam=0.0).total.item()
            assert a == pytest.approx(b, abs=1e-10)

    def test_literal_uniform_weights_variant(self):
        rng, Y, m, q_z, _ = self._smoothed_setup()
        q_e, e = _shared_prior()
        eps = rng.standard_normal((1, 1, Y.shape[1], 1))
        a = vsmc_terms(m, "lin", Y, q_e, e, q_z, eps, lam=0.0, carry_weights=False).total.item()
        b = vsmc_terms(m, "lin", Y, q_e, e, q_z, eps, lam=0.0, carry_weights=True).total.item()
        assert a == pytest.approx(b, abs=1e-10)


class TestVsmcApi:
    def test_single_particle_matches_elbo_end_to_end(self):
        m, enc, b = _toy()
        a = elbo(m, enc, b, np.random.default_rng(4), lam=0.2, analytic_kl=False).total.item()
        v = vsmc_objective(m, enc, b, np.random.default_rng(4), particles=1, lam=0.2).total.item()
        assert a == pytest.approx(v, rel=1e-12)

    def test_bad_particle_count(self):
        m, enc, b = _toy()
        with pytest.raises(UsageError):
            vsmc_bound(m, enc, "d0", b["d0"], 0, np.random.default_rng(0))

    def test_scalar(self):
        m, enc, b = _toy()
        v = vsmc_bound(m, enc, "d0", b["d0"], 4, np.random.default_rng(0))
        assert v.shape == ()


class TestDvbf:
    def test_requires_backward_encoder(self):
        m, enc, b = _toy(direction="bi")
        with pytest.raises(UsageError):
            dvbf_elbo(m, enc, b, np.random.default_rng(0))

    def test_deterministic_limit(self):
        m, enc, b = _toy(direction="backward")
        y = b["d0"]
        B, T = y.shape[:2]
        q_u = GaussianDiag(np.zeros((B, T, 2)), np.full((B, T, 2), 1e-6))
        e = Tensor(np.array([0.2, -0.1]))
        q_e = GaussianDiag(np.zeros(2), np.ones(2))
        r = dvbf_terms(m, "d0", y, q_e, e, q_u, np.zeros((B, T, 2)), lam=0.0)
        z = np.concatenate([np.tile(m.mu0.data, (B, 1, 1)),
                            rollout_mean(m, np.tile(m.mu0.data, (B, 1)), T - 1, e)], axis=1)
        from metassm.ssm import emission_mean
        lik = m.get("d0").likelihood
        mean = emission_mean(m, "d0", z).data
        R = lik.R_diag.data
        want = np.sum(-0.5 * ((y - mean) ** 2 / R + np.log(2 * np.pi * R)))
        assert r.recon.item() == pytest.approx(want, rel=1e-12)

    def test_kl_vanishes_for_standard_innovations(self):
        m, enc, b = _toy(direction="backward")
        y = b["d0"]
        B, T = y.shape[:2]
        q_u = GaussianDiag(np.zeros((B, T, 2)), np.ones((B, T, 2)))
        r = dvbf_terms(m, "d0", y, GaussianDiag(np.zeros(2), np.ones(2)), np.zeros(2), q_u,
                       np.random.default_rng(0).standard_normal((B, T, 2)))
        assert r.kl_state.item() == 0.0
        assert r.kl_embed.item() == 0.0

    def test_gradcheck_T3(self):
        m, enc, b = _toy(direction="backward", T=3)
        params = list(m.dynamics.tensors().values()) + [m.mu0] + list(enc.tensors().values())
        f = lambda: dvbf_elbo(m, enc, b, np.random.default_rng(2)).total
        assert gradcheck(f, params, h=1e-4) < 1e-5

    def test_objective_dispatch(self):
        m, enc, b = _toy(direction="backward")
        r = objective("dvbf", m, enc, b, np.random.default_rng(0))
        f = r.as_floats()
        assert f["total"] == pytest.approx(f["recon"] - f["kl_state"] - f["kl_embed"] - 1e-3 * f["penalty"])
