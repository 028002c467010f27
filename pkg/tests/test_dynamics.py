import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metassm import ndcompute as nd
from metassm.ndcompute.check import gradcheck
from metassm.dynamics import (
    DynamicsVariant, HypernetParams, LowRankDelta, canonical_variant, dynamics_mean,
    embedding_delta, embedding_penalty, export_vector_field, frobenius_penalty,
    hypernet_delta, make_grid, vector_field_grid,
)
from metassm.errors import ContractError, DimensionError
from metassm.ndcompute import Tensor


def _randomize_hypernet(v, rng, scale=0.5):
    for W, b in v.hypernet.layers:
        W.data[...] = rng.normal(scale=scale, size=W.shape)
        b.data[...] = rng.normal(scale=scale, size=b.shape)


def _dense_oracle(W_in, W_hh, W_o, b_in, b_hh, b_o, z, act=np.tanh):
    # plain per-point MLP with explicit loops over rows
    out = []
    for zi in np.atleast_2d(z):
        h1 = act(np.array([W_in[i] @ zi for i in range(W_in.shape[0])]) + b_in)
        h2 = act(np.array([W_hh[i] @ h1 for i in range(W_hh.shape[0])]) + b_hh)
        out.append(np.array([W_o[i] @ h2 for i in range(W_o.shape[0])]) + b_o)
    return np.array(out)


def _outer_sum(U, V):
    return sum(np.outer(U[:, k], V[:, k]) for k in range(U.shape[1]))


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestHypernet:
    def test_zero_delta_at_init(self, rng):
        v = DynamicsVariant.build("lowrank", 2, 2, rng, rank=2)
        for _ in range(5):
            d = hypernet_delta(v.hypernet, rng.normal(size=2) * 3)
            for name in d.factors:
                assert np.all(d.dense(name).data == 0.0)

    def test_factor_shapes_only_whh(self, rng):
        v = DynamicsVariant.build("lowrank", 2, 1, rng, hidden=(32, 32), rank=1, adapted=("W_hh",))
        d = hypernet_delta(v.hypernet, [0.3])
        U, V = d.factors["W_hh"]
        assert U.shape == (32, 1) and V.shape == (32, 1)
        assert set(d.factors) == {"W_hh"}

    def test_dense_matches_outer_products(self, rng):
        v = DynamicsVariant.build("lowrank", 3, 2, rng, hidden=(8, 6), rank=3)
        _randomize_hypernet(v, rng)
        d = hypernet_delta(v.hypernet, rng.normal(size=2))
        for name, (U, V) in d.factors.items():
            np.testing.assert_allclose(d.dense(name).data, _outer_sum(U.data, V.data), atol=1e-12, rtol=0)

    def test_output_size(self, rng):
        v = DynamicsVariant.build("lowrank", 2, 2, rng, hidden=(32, 32), rank=1)
        assert v.hypernet.output_size == (32 + 2) + (32 + 32)
        assert v.hypernet.layers[-1][0].shape == (16, 98)

    @pytest.mark.parametrize("d_z,rank", [(2, 1), (2, 2), (8, 3), (12, 5)])
    def test_parameter_economy(self, rng, d_z, rank):
        d1 = d2 = 32
        v = DynamicsVariant.build("lowrank", d_z, 2, rng, hidden=(d1, d2), rank=rank)
        assert v.hypernet.output_size == (d1 + d_z) * rank + (d2 + d1) * rank
        if rank < min(d_z, d1) / 2:
            assert v.hypernet.output_size < d2 * d1 + d1 * d_z

    def test_rank_exceeds_dimension(self, rng):
        with pytest.raises(DimensionError):
            DynamicsVariant.build("lowrank", 2, 2, rng, rank=3, adapted=("W_in",))

    def test_bad_adapted_name(self, rng):
        with pytest.raises(ContractError):
            DynamicsVariant.build("lowrank", 2, 2, rng, adapted=("W_o",))

    def test_wrong_embedding_length(self, rng):
        v = DynamicsVariant.build("lowrank", 2, 2, rng)
        with pytest.raises(DimensionError):
            hypernet_delta(v.hypernet, np.zeros(3))

    def test_gradients_flow_to_both_factors(self, rng):
        v = DynamicsVariant.build("lowrank", 2, 2, rng, hidden=(6, 5), rank=1)
        z = rng.normal(size=(4, 2))
        e = Tensor(rng.normal(size=2), requires_grad=True)
        with nd.Tape() as tape:
            loss = nd.sum_(nd.square(dynamics_mean(v, z, e)))
        tape.backward(loss)
        W_last = v.hypernet.layers[-1][0]
        assert np.any(W_last.grad != 0)

    def test_gradcheck_through_hypernet(self, rng):
        v = DynamicsVariant.build("lowrank", 2, 2, rng, hidden=(5, 4), rank=1, hyper_hidden=(3,))
        _randomize_hypernet(v, rng)
        z = rng.normal(size=(3, 2))
        e = Tensor(rng.normal(size=2), requires_grad=True)
        params = list(v.tensors().values()) + [e]
        err = gradcheck(lambda: nd.sum_(nd.tanh(dynamics_mean(v, z, e))), params)
        assert err < 1e-6


class TestDynamicsMean:
    def test_matches_dense_oracle(self, rng):
        v = DynamicsVariant.build("lowrank", 3, 2, rng, hidden=(7, 5), rank=2)
        _randomize_hypernet(v, rng)
        e = rng.normal(size=2)
        z = rng.normal(size=(10, 3))
        d = hypernet_delta(v.hypernet, e)
        s = v.shared
        W_in = s.W_in.data + _outer_sum(*(t.data for t in d.factors["W_in"]))
        W_hh = s.W_hh.data + _outer_sum(*(t.data for t in d.factors["W_hh"]))
        want = _dense_oracle(W_in, W_hh, s.W_o.data, s.b_in.data, s.b_hh.data, s.b_o.data, z)
        np.testing.assert_allclose(dynamics_mean(v, z, e).data, want, atol=1e-12, rtol=0)

    def test_low_rank_equivalence_many_draws(self, rng):
        v = DynamicsVariant.build("lowrank", 2, 2, rng, hidden=(6, 6), rank=1)
        _randomize_hypernet(v, rng)
        s = v.shared
        worst = 0.0
        for _ in range(1000):
            e = rng.normal(size=2) * 2
            z = rng.normal(size=2) * 2
            d = hypernet_delta(v.hypernet, e)
            W_in = s.W_in.data + d.dense("W_in").data
            W_hh = s.W_hh.data + d.dense("W_hh").data
            want = _dense_oracle(W_in, W_hh, s.W_o.data, s.b_in.data, s.b_hh.data, s.b_o.data, z)[0]
            worst = max(worst, np.max(np.abs(dynamics_mean(v, z, e).data - want)))
        assert worst <= 1e-12

    def test_zero_delta_collapses_to_shared(self, rng):
        v = DynamicsVariant.build("lowrank", 2, 2, rng, hidden=(8, 8))
        _randomize_hypernet(v, rng)
        W, b = v.hypernet.layers[-1]
        W.data[...] = 0.0
        b.data[...] = 0.0
        shared = DynamicsVariant("shared", v.shared, d_e=2)
        z = rng.normal(size=(50, 2)) * 3
        e = rng.normal(size=2)
        np.testing.assert_array_equal(dynamics_mean(v, z, e).data, dynamics_mean(shared, z).data)

    def test_shared_ignores_embedding(self, rng):
        v = DynamicsVariant.build("shared", 2, 2, rng)
        z = rng.normal(size=(5, 2))
        a = dynamics_mean(v, z, rng.normal(size=2)).data
        b = dynamics_mean(v, z, rng.normal(size=2)).data
        np.testing.assert_array_equal(a, b)

    def test_embedding_input_concatenates(self, rng):
        v = DynamicsVariant.build("embedding_input", 2, 3, rng, hidden=(5, 4))
        z = rng.normal(size=(6, 2))
        e = rng.normal(size=3)
        s = v.shared
        zc = np.hstack([z, np.tile(e, (6, 1))])
        want = _dense_oracle(s.W_in.data, s.W_hh.data, s.W_o.data, s.b_in.data, s.b_hh.data, s.b_o.data, zc)
        np.testing.assert_allclose(dynamics_mean(v, z, e).data, want, atol=1e-12, rtol=0)
        assert s.W_in.shape == (5, 5)

    @pytest.mark.parametrize("tag", ["lowrank", "shared", "embedding_input", "linear_adapter"])
    def test_all_zero_theta_gives_bias(self, rng, tag):
        v = DynamicsVariant.build(tag, 2, 2, rng, hidden=(4, 4))
        for t in v.tensors().values():
            t.data[...] = 0.0
        v.shared.b_o.data[...] = [0.5, -2.0]
        out = dynamics_mean(v, rng.normal(size=(3, 2)), rng.normal(size=2)).data
        np.testing.assert_array_equal(out, np.tile([0.5, -2.0], (3, 1)))

    @pytest.mark.parametrize("tag", ["lowrank", "shared", "embedding_input", "linear_adapter"])
    def test_wrong_latent_dim(self, rng, tag):
        v = DynamicsVariant.build(tag, 2, 2, rng)
        with pytest.raises(DimensionError):
            dynamics_mean(v, np.zeros(3), np.zeros(2))

    def test_relu_option(self, rng):
        v = DynamicsVariant.build("shared", 2, 1, rng, hidden=(4, 3), nonlinearity="relu")
        s = v.shared
        z = rng.normal(size=(4, 2))
        relu = lambda x: np.maximum(x, 0.0)
        want = _dense_oracle(s.W_in.data, s.W_hh.data, s.W_o.data, s.b_in.data, s.b_hh.data, s.b_o.data, z, relu)
        np.testing.assert_allclose(dynamics_mean(v, z).data, want, atol=1e-12)

    def test_unknown_variant(self, rng):
        with pytest.raises(ContractError):
            DynamicsVariant.build("nonsense", 2, 2, rng)

    @pytest.mark.parametrize("alias,tag", [("LowRankHypernet", "lowrank"), ("SharedOnly", "shared"),
                                           ("EmbeddingInput", "embedding_input"), ("Linear-Adapter", "linear_adapter")])
    def test_aliases(self, alias, tag):
        assert canonical_variant(alias) == tag


class TestLinearAdapter:
    def test_delta_is_linear(self, rng):
        v = DynamicsVariant.build("linear_adapter", 2, 2, rng, hidden=(5, 4))
        v.adapter.data[...] = rng.normal(size=v.adapter.shape)
        e1, e2 = rng.normal(size=2), rng.normal(size=2)
        a, b = 0.7, -1.3
        d12 = embedding_delta(v, a * e1 + b * e2)
        d1, d2 = embedding_delta(v, e1), embedding_delta(v, e2)
        for k in d12:
            np.testing.assert_allclose(d12[k].data, a * d1[k].data + b * d2[k].data, atol=1e-13)

    def test_adapts_every_parameter(self, rng):
        v = DynamicsVariant.build("linear_adapter", 2, 2, rng, hidden=(5, 4))
        n = sum(t.size for t in v.shared.tensors().values())
        assert v.adapter.shape == (n, 2)

    def test_matches_shifted_oracle(self, rng):
        v = DynamicsVariant.build("linear_adapter", 2, 2, rng, hidden=(5, 4))
        v.adapter.data[...] = rng.normal(scale=0.3, size=v.adapter.shape)
        e = rng.normal(size=2)
        flat = v.adapter.data @ e
        params, off = {}, 0
        for k, t in v.shared.tensors().items():
            params[k] = t.data + flat[off:off + t.size].reshape(t.shape)
            off += t.size
        z = rng.normal(size=(3, 2))
        want = _dense_oracle(params["W_in"], params["W_hh"], params["W_o"],
                             params["b_in"], params["b_hh"], params["b_o"], z)
        np.testing.assert_allclose(dynamics_mean(v, z, e).data, want, atol=1e-12)

    def test_zero_adapter_equals_shared(self, rng):
        v = DynamicsVariant.build("linear_adapter", 2, 2, rng)
        shared = DynamicsVariant("shared", v.shared, d_e=2)
        z = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(dynamics_mean(v, z, np.ones(2)).data, dynamics_mean(shared, z).data)


class TestFrobenius:
    def test_zero_factors(self):
        d = LowRankDelta({"W_in": (Tensor(np.zeros((4, 1))), Tensor(np.zeros((2, 1))))})
        assert frobenius_penalty(d).item() == 0.0

    def test_unit_outer_product(self):
        d = LowRankDelta({"W_hh": (Tensor([[1.0], [0.0]]), Tensor([[0.0], [1.0]]))})
        assert frobenius_penalty(d).item() == pytest.approx(1.0, abs=1e-15)

    def test_matches_dense(self, rng):
        for _ in range(20):
            r = int(rng.integers(1, 4))
            d = LowRankDelta({
                "W_in": (Tensor(rng.normal(size=(7, r))), Tensor(rng.normal(size=(3, r)))),
                "W_hh": (Tensor(rng.normal(size=(5, r))), Tensor(rng.normal(size=(7, r)))),
            })
            want = sum(np.linalg.norm(_outer_sum(U.data, V.data), "fro") for U, V in d.factors.values())
            assert frobenius_penalty(d).item() == pytest.approx(want, rel=1e-10)

    def test_gradient_finite_at_zero(self):
        U = Tensor(np.zeros((3, 1)), requires_grad=True)
        V = Tensor(np.zeros((2, 1)), requires_grad=True)
        with nd.Tape() as tape:
            p = frobenius_penalty(LowRankDelta({"W_in": (U, V)}))
        tape.backward(p)
        assert np.all(np.isfinite(U.grad)) and np.all(np.isfinite(V.grad))

    def test_penalty_dispatch(self, rng):
        for tag in ("shared", "embedding_input"):
            v = DynamicsVariant.build(tag, 2, 2, rng)
            assert embedding_penalty(v, np.ones(2)).item() == 0.0
        v = DynamicsVariant.build("linear_adapter", 2, 2, rng, hidden=(3, 3))
        v.adapter.data[...] = rng.normal(size=v.adapter.shape)
        e = rng.normal(size=2)
        flat = v.adapter.data @ e
        want, off = 0.0, 0
        for t in v.shared.tensors().values():
            want += np.linalg.norm(flat[off:off + t.size])
            off += t.size
        assert embedding_penalty(v, e).item() == pytest.approx(want, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_rank_bound(rank, seed):
    rng = np.random.default_rng(seed)
    v = DynamicsVariant.build("lowrank", 4, 2, rng, hidden=(6, 5), rank=rank)
    _randomize_hypernet(v, rng)
    d = hypernet_delta(v.hypernet, rng.normal(size=2))
    for name in d.factors:
        s = np.linalg.svd(d.dense(name).data, compute_uv=False)
        assert np.sum(s > 1e-10) <= rank


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_neutral_element_pointwise(seed):
    rng = np.random.default_rng(seed)
    v = DynamicsVariant.build("lowrank", 2, 2, rng, hidden=(5, 5))
    shared = DynamicsVariant("shared", v.shared, d_e=2)
    z = rng.normal(size=(8, 2)) * 4
    np.testing.assert_array_equal(dynamics_mean(v, z, rng.normal(size=2)).data, dynamics_mean(shared, z).data)


class TestVectorField:
    def test_matches_pointwise(self, rng):
        v = DynamicsVariant.build("lowrank", 2, 2, rng)
        _randomize_hypernet(v, rng)
        e = rng.normal(size=2)
        grid = make_grid(-2, 2, 5)
        field = vector_field_grid(v, e, grid).data
        for g, f in zip(grid, field):
            np.testing.assert_allclose(f, dynamics_mean(v, g, e).data - g, atol=1e-14)

    def test_identity_dynamics_zero_field(self):
        # relu pair trick: W_o relu(z) - W_o relu(-z) = z
        d_z = 2
        W_in = np.vstack([np.eye(d_z), -np.eye(d_z)])
        t = lambda a: Tensor(a)
        from metassm.dynamics import SharedDynamicsParams
        s = SharedDynamicsParams(t(W_in), t(np.eye(4)), t(np.hstack([np.eye(d_z), -np.eye(d_z)])),
                                 t(np.zeros(4)), t(np.zeros(4)), t(np.zeros(2)), "relu")
        v = DynamicsVariant("shared", s, d_e=1)
        field = vector_field_grid(v, None, make_grid(-3, 3, 7)).data
        np.testing.assert_allclose(field, 0.0, atol=1e-15)

    def test_grid_layout(self):
        g = make_grid(0, 1, 3)
        assert g.shape == (9, 2)
        np.testing.assert_array_equal(g[:3, 0], [0, 0.5, 1])
        np.testing.assert_array_equal(g[:3, 1], [0, 0, 0])

    def test_export(self, tmp_path, rng):
        v = DynamicsVariant.build("shared", 2, 1, rng)
        grid = make_grid(-1, 1, 4)
        field = vector_field_grid(v, None, grid).data
        path = tmp_path / "vf.txt"
        export_vector_field(path, grid, field)
        lines = path.read_text().splitlines()
        assert lines[0] == "# z1 z2 dz1 dz2"
        back = np.loadtxt(path)
        np.testing.assert_allclose(back, np.hstack([grid, field]), rtol=1e-9)

    def test_export_rejects_3d(self, tmp_path):
        with pytest.raises(DimensionError):
            export_vector_field(tmp_path / "x", np.zeros((2, 3)), np.zeros((2, 3)))
