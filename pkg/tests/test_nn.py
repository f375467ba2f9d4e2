import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import ALL_ARCHS, small_spec
from hfnn import checkpoint, nn
from hfnn.autodiff import Tape, backprop
from hfnn.autodiff import tensor as T
from hfnn.errors import ConfigurationError, UsageError


def _reference(store, x):
    """Independent dense evaluation written from the layer equations."""
    spec = store.spec
    h = x
    if spec.embedding == "fourier":
        a = 2 * np.pi * x @ store.B.T
        h = np.concatenate([np.cos(a), np.sin(a)], -1)

    def W(name):
        if spec.factorization == "rwf":
            return store.view(name, "scale-s")[None, :] * store.view(name, "direction-v")
        return store.view(name, "weight")

    def aff(h, name):
        return h @ W(name) + store.view(name, "bias")

    if spec.kind == "modified-mlp":
        U, V = np.tanh(aff(h, "encoder-U")), np.tanh(aff(h, "encoder-V"))
        for l in range(spec.hidden_layers):
            t = np.tanh(aff(h, f"hidden{l}"))
            h = t * U + (1 - t) * V
    else:
        for l in range(spec.hidden_layers):
            h = np.tanh(aff(h, f"hidden{l}"))
    return aff(h, "output")


def test_fourier_first_layer_width():
    spec = nn.NetworkSpec(3, 4, embedding="fourier", fourier_e=128)
    assert spec.feature_dim == 256
    store = nn.init(spec)
    assert store.view("hidden0", "weight").shape == (256, 64)
    assert store.B.shape == (128, 3)


def test_rwf_reproduces_xavier_draw():
    spec = small_spec(factorization="rwf", kind="modified-mlp")
    store = nn.init(spec)
    rng = np.random.default_rng(spec.seed)
    for (name, fi, fo), w in zip(nn._layers(spec), nn.effective_weights(store)):
        drawn = rng.normal(0.0, nn.xavier_std(fi, fo), size=(fi, fo))
        rng.normal(spec.rwf_mu, spec.rwf_sigma, size=fo)
        # v = w / s then s * v: one rounding each way
        np.testing.assert_array_max_ulp(w, drawn, maxulp=1)


def test_rwf_scales_are_lognormal():
    store = nn.init(nn.NetworkSpec(3, 4, 4, 256, factorization="rwf"))
    s = np.concatenate([store.view(f"hidden{l}", "scale-s") for l in range(4)])
    assert np.mean(np.log(s)) == pytest.approx(0.5, abs=0.01)
    assert np.std(np.log(s)) == pytest.approx(0.1, abs=0.01)


@pytest.mark.parametrize("arch", ALL_ARCHS)
def test_same_seed_same_init(arch):
    a, b = nn.init(small_spec(**arch)), nn.init(small_spec(**arch))
    assert np.array_equal(a.theta, b.theta)
    c = nn.init(small_spec(seed=6, **arch))
    assert not np.array_equal(a.theta, c.theta)


def test_xavier_and_zero_bias():
    store = nn.init(nn.NetworkSpec(3, 4, 2, 300, seed=1))
    w = store.view("hidden1", "weight")
    assert np.std(w) == pytest.approx(nn.xavier_std(300, 300), rel=0.02)
    for l in range(2):
        assert not store.view(f"hidden{l}", "bias").any()


def test_layout_offsets_partition_theta():
    for arch in ALL_ARCHS:
        store = nn.init(small_spec(**arch))
        off = 0
        for e in store.layout:
            assert e.offset == off
            off += e.size
        assert off == store.size == nn.param_count(store.spec)


def test_fourier_embed_examples():
    B = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(nn.fourier_embed(np.zeros(3), B), np.r_[np.ones(5), np.zeros(5)])
    out = nn.fourier_embed([0.25], [[1.0]])
    assert np.allclose(out, [0.0, 1.0], atol=1e-15)


@given(arrays(np.float64, 3, elements=st.floats(-10, 10)), st.integers(1, 20), st.integers(0, 2**31))
def test_fourier_embed_bounded_and_unit_norm_rows(x, e, seed):
    B = np.random.default_rng(seed).normal(size=(e, 3))
    g = nn.fourier_embed(x, B)
    assert g.shape == (2 * e,)
    assert np.all(np.abs(g) <= 1.0)
    assert np.sum(g * g) == pytest.approx(e, rel=1e-12)


def test_zero_params_give_zero_output():
    store = nn.init(nn.NetworkSpec(3, 4, 2, 16))
    store.theta[:] = 0.0
    assert not nn.mlp_forward(store, np.random.default_rng(0).normal(size=(7, 3))).any()


def test_tiny_mlp_against_hand_rolled():
    store = nn.init(nn.NetworkSpec(1, 1, 1, 16, seed=3))
    W1, b1 = store.view("hidden0", "weight"), store.view("hidden0", "bias")
    W2, b2 = store.view("output", "weight"), store.view("output", "bias")
    for x in np.linspace(-2, 2, 9):
        h = [np.tanh(x * W1[0, j] + b1[j]) for j in range(16)]
        want = sum(h[j] * W2[j, 0] for j in range(16)) + b2[0]
        assert abs(nn.mlp_forward(store, np.array([x]))[0] - want) <= 1e-12


@pytest.mark.parametrize("arch", ALL_ARCHS)
def test_forward_matches_reference(arch, rng):
    store = nn.init(small_spec(**arch))
    x = rng.normal(size=(20, 3))
    assert np.allclose(nn.forward(store, x), _reference(store, x), rtol=0, atol=1e-12)


@pytest.mark.parametrize("arch", ALL_ARCHS)
def test_tape_and_jet_paths_agree(arch, rng):
    store = nn.init(small_spec(**arch))
    x = rng.normal(size=(4, 3)) * 0.5
    J = nn.forward_jet(store, x, order=2)
    for b in range(4):
        tp = Tape()
        xs = tp.inputs(x[b])
        outs = nn.tape_forward(store, xs)
        for k, o in enumerate(outs):
            assert o.value == pytest.approx(J[0, b, k], abs=1e-12)
            g = tp.gradient(o, xs)
            assert np.allclose(g, J[1:4, b, k], atol=1e-11)
            for j in range(3):
                assert tp.input_hessian_diag(o, xs[j]) == pytest.approx(J[4 + j, b, k], abs=1e-10)


@pytest.mark.parametrize("kind", ["mlp", "modified-mlp"])
def test_input_gradient_vs_finite_differences(kind, rng):
    store = nn.init(nn.NetworkSpec(3, 4, 3, 32, kind=kind, seed=2))
    x = rng.normal(size=(10, 3))
    J = nn.forward_jet(store, x, order=2)
    h = 1e-5
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (nn.forward(store, x + e) - nn.forward(store, x - e)) / (2 * h)
        assert np.allclose(J[1 + j], fd, rtol=1e-5, atol=1e-8)


def test_gate_saturation_gives_encoder_u(rng):
    store = nn.init(nn.NetworkSpec(3, 2, 2, 8, kind="modified-mlp", seed=4))
    for l in range(2):
        store.view(f"hidden{l}", "weight")[...] = 0.0
        store.view(f"hidden{l}", "bias")[...] = 50.0  # tanh -> 1
    x = rng.normal(size=(5, 3))
    U = np.tanh(x @ store.view("encoder-U", "weight") + store.view("encoder-U", "bias"))
    want = U @ store.view("output", "weight") + store.view("output", "bias")
    assert np.allclose(nn.modified_mlp_forward(store, x), want, atol=1e-14)


def test_modified_mlp_param_count_excess():
    base = dict(input_dim=3, output_dim=4, hidden_layers=4, hidden_width=256)
    diff = nn.param_count(nn.NetworkSpec(**base, kind="modified-mlp")) - nn.param_count(nn.NetworkSpec(**base))
    assert diff == 2 * (3 * 256 + 256)


def test_modified_mlp_finite_for_bounded_inputs(rng):
    store = nn.init(nn.NetworkSpec(3, 4, 4, 64, kind="modified-mlp", embedding="fourier", fourier_e=16))
    x = rng.uniform(-10, 10, size=(500, 3))
    assert np.isfinite(nn.forward(store, x)).all()


def test_unit_scale_gives_w_equal_v():
    store = nn.init(small_spec(factorization="rwf"))
    for name, _, _ in nn._layers(store.spec):
        store.view(name, "scale-s")[...] = 1.0
    for (name, _, _), w in zip(nn._layers(store.spec), nn.effective_weights(store)):
        assert np.array_equal(w, store.view(name, "direction-v"))


def test_effective_weights_needs_rwf():
    with pytest.raises(UsageError):
        nn.effective_weights(nn.init(small_spec()))


@pytest.mark.parametrize("kind", ["mlp", "modified-mlp"])
def test_rwf_invariance(kind, rng):
    store = nn.init(small_spec(kind=kind, factorization="rwf", embedding="fourier", fourier_e=4))
    plain = nn.materialize(store)
    x = rng.normal(size=(50, 3))
    assert np.max(np.abs(nn.forward(store, x) - nn.forward(plain, x))) <= 1e-12


def test_scale_gradient_chain_rule(rng):
    store = nn.init(small_spec(factorization="rwf"))
    x = rng.normal(size=(6, 3))

    def loss(ls):
        return T.tsum(T.square(nn.forward_jet(store, x, order=0, leaves=ls)))

    leaves = store.leaves()
    grads = dict(zip([(e.layer, e.role) for e in store.layout], backprop(loss(leaves), leaves)))
    # dL/ds_j = sum_i v_ij dL/dw_ij, with dL/dw = dL/dv / s
    s = store.view("hidden1", "scale-s")
    v = store.view("hidden1", "direction-v")
    dLdw = grads[("hidden1", "direction-v")] / s[None, :]
    assert np.allclose(grads[("hidden1", "scale-s")], np.sum(v * dLdw, axis=0), rtol=1e-10)
    h = 1e-6
    for j in range(s.size):
        s[j] += h
        a = float(np.sum(nn.forward(store, x) ** 2))
        s[j] -= 2 * h
        b = float(np.sum(nn.forward(store, x) ** 2))
        s[j] += h
        assert grads[("hidden1", "scale-s")][j] == pytest.approx((a - b) / (2 * h), rel=1e-5, abs=1e-8)


def test_forward_dimension_mismatch():
    store = nn.init(small_spec())
    with pytest.raises(ConfigurationError):
        nn.forward(store, np.zeros((2, 4)))


@pytest.mark.parametrize(
    "bad",
    [dict(hidden_layers=0), dict(hidden_width=0), dict(kind="resnet"), dict(embedding="hash"),
     dict(factorization="svd"), dict(activation="relu"), dict(embedding="fourier", fourier_e=0)],
)
def test_spec_validation(bad):
    with pytest.raises(ConfigurationError):
        small_spec(**bad)


@pytest.mark.parametrize("arch", ALL_ARCHS)
def test_spec_text_roundtrip(arch):
    spec = small_spec(**arch)
    assert nn.NetworkSpec.from_text(spec.to_text()) == spec


@pytest.mark.parametrize("arch", ALL_ARCHS)
def test_checkpoint_bit_exact(arch, tmp_path):
    store = nn.init(small_spec(**arch))
    store.theta += np.random.default_rng(9).normal(size=store.size) * 1e-3
    path = tmp_path / "net.bin"
    checkpoint.save(path, store)
    back = checkpoint.load(path)
    assert back.spec == store.spec
    assert back.theta.tobytes() == store.theta.tobytes()
    if store.B is None:
        assert back.B is None
    else:
        assert back.B.tobytes() == store.B.tobytes()
    assert checkpoint.dumps(back) == checkpoint.dumps(store)
    assert path.read_bytes()[:4] == b"HFNN"


def test_checkpoint_extras_roundtrip(tmp_path):
    store = nn.init(small_spec())
    m = np.arange(store.size) * 0.5
    v = np.full(store.size, 2.0)
    lam = np.array([1.0, 1.5, 0.7, 1.2, 0.25])
    checkpoint.save(tmp_path / "c.bin", store, adam=(17, m, v), lambdas=lam, scaling="velocity=0.1\n")
    back, ex = checkpoint.load(tmp_path / "c.bin", with_extras=True)
    t, m2, v2 = ex["adam"]
    assert t == 17
    assert np.array_equal(m2, m) and np.array_equal(v2, v)
    assert np.array_equal(ex["lambdas"], lam)
    assert ex["scaling"] == "velocity=0.1\n"
    assert back.theta.tobytes() == store.theta.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(Exception):
        checkpoint.load(p)


def test_spec_is_frozen():
    spec = small_spec()
    with pytest.raises(dataclasses.FrozenInstanceError):
        spec.hidden_width = 3
