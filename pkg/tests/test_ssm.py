import math

import numpy as np
import pytest

from metassm import ndcompute as nd
from metassm.checkpoint import FormatError, decode, encode, load_checkpoint, read_checkpoint, save_checkpoint
from metassm.dynamics import dynamics_mean
from metassm.errors import ContractError, DimensionError, UnknownDatasetError
from metassm.inference import EncoderConfig, Encoders
from metassm.ndcompute import GaussianDiag, Tensor
from metassm.ndcompute.check import gradcheck
from metassm.ssm import (
    GenerativeModel, ModelConfig, ReadInParams, embedding_prior, emission_mean, emit, init_emission_pca, read_in,
    rollout_mean, sample_trajectory, softplus_inv, transition,
)


@pytest.fixture
def model():
    rng = np.random.default_rng(3)
    m = GenerativeModel.create(ModelConfig(d_z=2, d_e=2, d_ybar=8, hidden=(8, 8)), rng)
    m.register("a", 30, rng)
    m.register("b", 45, rng)
    return m


def test_embedding_prior():
    p = embedding_prior(1)
    np.testing.assert_array_equal(p.mean.data, [0.0])
    np.testing.assert_array_equal(p.var.data, [1.0])
    p2 = embedding_prior(2)
    np.testing.assert_array_equal(p2.mean.data, [0.0, 0.0])
    assert nd.gaussian_kl(p2, p2).item() == 0.0
    with pytest.raises(ContractError):
        embedding_prior(0)


class TestTransition:
    def test_zero_delta_matches_shared(self, model):
        z = np.random.default_rng(0).normal(size=(4, 2))
        e = np.array([0.3, -1.0])
        got = transition(model, "a", z, e)
        from metassm.dynamics import DynamicsVariant
        shared = DynamicsVariant("shared", model.dynamics.shared, d_e=2)
        np.testing.assert_array_equal(got.mean.data, dynamics_mean(shared, z).data)
        np.testing.assert_allclose(got.var.data, np.tile(model.get("a").noise.Q_diag.data, (4, 1)))

    def test_logpdf_at_mode(self, model):
        z = np.array([0.5, -0.2])
        p = transition(model, "a", z, np.zeros(2))
        Q = model.get("a").noise.Q_diag.data
        want = np.sum(-0.5 * np.log(2 * np.pi * Q))
        assert nd.gaussian_logpdf(p.mean, p).item() == pytest.approx(want, abs=1e-12)

    def test_sampling_moments(self, model):
        rng = np.random.default_rng(9)
        z = np.array([0.1, 0.4])
        p = transition(model, "b", z, np.ones(2))
        n = 100_000
        draws = nd.reparam_sample(p, rng.standard_normal((n, 2))).data
        se_mean = np.sqrt(p.var.data / n)
        assert np.all(np.abs(draws.mean(0) - p.mean.data) < 3 * se_mean)
        se_var = p.var.data * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(draws.var(0, ddof=1) - p.var.data) < 3 * se_var)

    def test_unknown_dataset(self, model):
        with pytest.raises(UnknownDatasetError):
            transition(model, "zz", np.zeros(2), np.zeros(2))
        with pytest.raises(KeyError):
            emit(model, "zz", np.zeros(2))


class TestEmit:
    def test_identity_readout(self):
        rng = np.random.default_rng(0)
        m = GenerativeModel.create(ModelConfig(d_z=2, d_e=1), rng)
        m.register("x", 2, rng)
        m.get("x").likelihood.C.data[...] = np.eye(2)
        np.testing.assert_array_equal(emit(m, "x", [1.0, 2.0]).mean.data, [1.0, 2.0])

    def test_logpdf_delegation(self, model):
        rng = np.random.default_rng(1)
        z = rng.normal(size=2)
        y = rng.normal(size=30)
        lik = model.get("a").likelihood
        ref = GaussianDiag(lik.C.data @ z + lik.D.data, lik.R_diag.data)
        assert nd.gaussian_logpdf(y, emit(model, "a", z)).item() == nd.gaussian_logpdf(y, ref).item()

    def test_gradient_wrt_C(self, model):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(3, 2))
        y = rng.normal(size=(3, 30))
        lik = model.get("a").likelihood
        err = gradcheck(lambda: nd.gaussian_logpdf(y, emit(model, "a", z)), [lik.C, lik.D, lik.R_raw])
        assert err < 1e-6

    def test_dimension_error(self, model):
        with pytest.raises(DimensionError):
            emission_mean(model, "a", np.zeros(3))


class TestSampling:
    def test_noise_free_composition(self, model):
        rng = np.random.default_rng(4)
        e = rng.normal(size=2)
        z1 = rng.normal(size=2)
        z, y = sample_trajectory(model, "a", e, 3, z1=z1, noise_free=True)
        z2 = dynamics_mean(model.dynamics, z1, e).data
        z3 = dynamics_mean(model.dynamics, z2, e).data
        np.testing.assert_array_equal(z, np.stack([z1, z2, z3]))
        np.testing.assert_array_equal(y, emission_mean(model, "a", z).data)

    def test_identity_dynamics_constant(self):
        rng = np.random.default_rng(0)
        cfg = ModelConfig(d_z=2, d_e=1, hidden=(4, 4), nonlinearity="relu", variant="shared")
        m = GenerativeModel.create(cfg, rng)
        m.register("x", 5, rng)
        s = m.dynamics.shared
        s.W_in.data[...] = np.vstack([np.eye(2), -np.eye(2)])
        s.W_hh.data[...] = np.eye(4)
        s.W_o.data[...] = np.hstack([np.eye(2), -np.eye(2)])
        for b in (s.b_in, s.b_hh, s.b_o):
            b.data[...] = 0.0
        ds = m.get("x")
        ds.noise.Q_raw.data[...] = -50.0
        ds.likelihood.R_raw.data[...] = -50.0
        z, _ = sample_trajectory(m, "x", None, 50, z1=[0.7, -0.3], seed=1)
        np.testing.assert_allclose(z, np.tile([0.7, -0.3], (50, 1)), atol=0.05)

    def test_seed_determinism(self, model):
        a = sample_trajectory(model, "b", np.ones(2), 20, seed=5)
        b = sample_trajectory(model, "b", np.ones(2), 20, seed=5)
        c = sample_trajectory(model, "b", np.ones(2), 20, seed=6)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
        assert a[0].tobytes() != c[0].tobytes()

    def test_shapes(self, model):
        z, y = sample_trajectory(model, "b", np.zeros(2), 7, seed=0)
        assert z.shape == (7, 2) and y.shape == (7, 45)
        with pytest.raises(ContractError):
            sample_trajectory(model, "b", np.zeros(2), 0)

    def test_rollout_matches_sampler(self, model):
        e = np.array([0.2, 0.1])
        z1 = np.array([0.3, 0.3])
        z, _ = sample_trajectory(model, "a", e, 6, z1=z1, noise_free=True)
        np.testing.assert_array_equal(rollout_mean(model, z1, 5, e), z[1:])
        assert rollout_mean(model, np.zeros((3, 2)), 4, e).shape == (3, 4, 2)


class TestReadIn:
    def test_zero_weights(self, model):
        for t in model.get("a").read_in.tensors().values():
            t.data[...] = 0.0
        out = read_in(model, "a", np.random.default_rng(0).normal(size=(2, 5, 30)))
        assert out.shape == (2, 5, 8)
        assert np.all(out.data == 0.0)

    def test_identity(self):
        ri = ReadInParams.identity(4)
        y = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(ri(Tensor(y)).data, y)

    def test_dimension_mismatch(self, model):
        with pytest.raises(DimensionError):
            read_in(model, "a", np.zeros((1, 5, 31)))

    def test_default_widths(self, model):
        ri = model.get("a").read_in
        assert [W.shape for W, _ in ri.layers] == [(30, 64), (64, 8)]


class TestRegistry:
    def test_one_entry_per_dataset(self, model):
        assert set(model.datasets) == {"a", "b"}
        names = model.tensors()
        assert any(k.startswith("datasets/a/") for k in names)
        assert any(k.startswith("datasets/b/") for k in names)

    def test_duplicate_rejected(self, model):
        with pytest.raises(ContractError):
            model.register("a", 10, np.random.default_rng(0))

    def test_per_dataset_isolation(self, model):
        rng = np.random.default_rng(7)
        y = rng.normal(size=(2, 4, 45))
        z = rng.normal(size=(4, 2))
        before = (read_in(model, "b", y).data.tobytes(), emit(model, "b", z).mean.data.tobytes(),
                  transition(model, "b", z, np.zeros(2)).var.data.tobytes())
        for t in model.dataset_tensors("a").values():
            t.data[...] = rng.normal(size=t.shape)
        after = (read_in(model, "b", y).data.tobytes(), emit(model, "b", z).mean.data.tobytes(),
                 transition(model, "b", z, np.zeros(2)).var.data.tobytes())
        assert before == after

    def test_variance_floor(self, model):
        model.get("a").noise.Q_raw.data[...] = -800.0
        assert np.all(model.get("a").noise.Q_diag.data >= 1e-6)

    def test_softplus_inverse(self):
        v = np.array([1e-3, 0.1, 1.0, 30.0])
        np.testing.assert_allclose(np.logaddexp(0, softplus_inv(v)), v, rtol=1e-12)


class TestCheckpoint:
    def _build(self, variant):
        rng = np.random.default_rng(12)
        m = GenerativeModel.create(ModelConfig(d_z=2, d_e=2, variant=variant, hidden=(6, 5)), rng)
        m.register("x1", 31, rng)
        m.register("x2", 40, rng)
        enc = Encoders.create(m, EncoderConfig(embed_hidden=4, state_hidden=5), rng)
        return m, enc

    @pytest.mark.parametrize("variant", ["lowrank", "shared", "embedding_input", "linear_adapter"])
    def test_byte_exact_round_trip(self, tmp_path, variant):
        m, enc = self._build(variant)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, m, enc, meta={"seed": 4})
        m2, enc2, manifest = load_checkpoint(p1)
        save_checkpoint(p2, m2, enc2, meta=manifest["meta"])
        assert p1.read_bytes() == p2.read_bytes()
        for (k, a), (k2, b) in zip(sorted(m.tensors().items()), sorted(m2.tensors().items())):
            assert k == k2 and a.data.tobytes() == b.data.tobytes()
        assert m2.d_y == m.d_y and m2.dynamics.tag == m.dynamics.tag

    def test_layout(self):
        buf = encode({"k": 1}, {"w": np.arange(6.0).reshape(2, 3)})
        assert buf[:8] == b"MSSMCKPT"
        manifest, arrays = decode(buf)
        assert manifest == {"k": 1}
        np.testing.assert_array_equal(arrays["w"], np.arange(6.0).reshape(2, 3))
        # name length, name, rank, dims, payload at the tail
        tail = buf[-(4 + 1 + 4 + 16 + 48):]
        assert tail[:4] == (1).to_bytes(4, "little") and tail[4:5] == b"w"
        assert tail[5:9] == (2).to_bytes(4, "little")
        assert np.frombuffer(tail[-48:], "<f8").tolist() == list(range(6))

    def test_scalar_array(self):
        _, arrays = decode(encode({}, {"s": np.array(3.5)}))
        assert arrays["s"].shape == () and float(arrays["s"]) == 3.5

    def test_corruption_detected(self, tmp_path):
        buf = encode({}, {"w": np.ones(3)})
        with pytest.raises(FormatError):
            decode(b"XXXXXXXX" + buf[8:])
        with pytest.raises(FormatError):
            decode(buf[:-3])
        with pytest.raises(FormatError):
            decode(buf + b"\0")
        path = tmp_path / "bad"
        path.write_bytes(b"junk")
        with pytest.raises(OSError):
            read_checkpoint(path)


def _spiral(clockwise: bool, lift: np.ndarray, rng) -> np.ndarray:
    t = np.arange(60) * 0.1
    sign = -1.0 if clockwise else 1.0
    phase = rng.uniform(0, 2 * np.pi, size=(5, 1))
    z = np.stack([np.cos(sign * t + phase), np.sin(sign * t + phase)], -1)
    return z @ lift.T + 2.0


@pytest.mark.parametrize("clockwise", [False, True])
@pytest.mark.parametrize("mirror", [False, True])
def test_pca_emission_pins_chirality(clockwise, mirror):
    rng = np.random.default_rng(8)
    lift = rng.normal(size=(6, 2))
    if mirror:
        lift = lift @ np.diag([1.0, -1.0])
    y = _spiral(clockwise, lift, rng)
    m = GenerativeModel.create(ModelConfig(d_z=2, d_e=1, d_ybar=4, hidden=(4, 4)), rng)
    m.register("s", 6, rng)
    init_emission_pca(m, "s", y)
    lik = m.get("s").likelihood
    np.testing.assert_allclose(lik.D.data, y.reshape(-1, 6).mean(0))
    # least-squares latents under the new emission turn counter-clockwise
    x = np.linalg.lstsq(lik.C.data, (y - lik.D.data).reshape(-1, 6).T, rcond=None)[0].T.reshape(5, 60, 2)
    turn = x[:, :-1, 0] * x[:, 1:, 1] - x[:, :-1, 1] * x[:, 1:, 0]
    assert turn.sum() > 0
    # the two columns span the observed plane
    resid = (y - lik.D.data).reshape(-1, 6) - x.reshape(-1, 2) @ lik.C.data.T
    assert np.abs(resid).max() < 1e-8


def test_pca_emission_shape_checked(model):
    with pytest.raises(DimensionError):
        init_emission_pca(model, "a", np.zeros((2, 5, 31)))
