import numpy as np
import pytest
from hypothesis import given, strategies as st

from hfnn import geometry as G
from hfnn import nn
from hfnn import operators as O
from hfnn.errors import ConfigurationError, ValidationError
from hfnn.physics import FluidParams
from hfnn.training.problems import Scaling


def make_spec(q=8, m1=4, m2=3, width=6, seed=0, partition=None):
    b1 = nn.NetworkSpec(m1, q, 2, width, seed=seed)
    b2 = nn.NetworkSpec(m2, q, 2, width, seed=seed + 1)
    tr = nn.NetworkSpec(3, q, 2, width, kind="modified-mlp", seed=seed + 2)
    return O.OperatorSpec(b1, b2, tr, partition or O.even_partition(q))


@pytest.fixture
def model():
    return O.OperatorModel(make_spec())


def _direct(model, s1, s2, x):
    """Independent evaluation: three separate forwards and explicit sums."""
    b1 = nn.forward(model.branch1, s1)
    b2 = nn.forward(model.branch2, s2)
    tau = nn.forward(model.trunk, x)
    out = []
    for name in O.OUTPUTS:
        a, b = model.spec.range_of(name)
        out.append(sum(b1[k] * b2[k] * tau[k] for k in range(a, b)))
    return np.array(out)


def test_forward_matches_direct(model, rng):
    s1, s2 = rng.normal(size=4), rng.normal(size=3)
    for x in rng.normal(size=(5, 3)):
        assert np.allclose(O.deeponet_forward(model, s1, s2, x), _direct(model, s1, s2, x), rtol=0, atol=1e-12)


def test_zero_trunk_gives_zero(model, rng):
    tr = model.trunk
    tr.view("output", "weight")[...] = 0.0
    tr.view("output", "bias")[...] = 0.0
    out = O.deeponet_forward(model, rng.normal(size=4), rng.normal(size=3), rng.normal(size=(6, 3)))
    assert not out.any()


def test_pressure_range_1_based_301_400():
    spec = make_spec(q=400)
    a, b = spec.range_of("p")
    assert (a + 1, b) == (301, 400)
    S = O.partition_matrix(spec)
    assert S[300:, 3].all() and not S[:300, 3].any()


def test_unit_branch2_reproduces_vanilla_deeponet(rng):
    # a single scalar partition fed by branch1 and trunk only
    q = 8
    spec = make_spec(q=q, partition=(("v1", 0, 2), ("v2", 2, 4), ("v3", 4, 6), ("p", 6, 8)))
    m = O.OperatorModel(spec)
    m.branch2.view("output", "weight")[...] = 0.0
    m.branch2.view("output", "bias")[...] = 1.0
    s1 = rng.normal(size=4)
    x = rng.normal(size=(4, 3))
    got = O.deeponet_forward(m, s1, rng.normal(size=3), x)
    beta = nn.forward(m.branch1, s1)
    tau = nn.forward(m.trunk, x)
    want = np.stack([tau[:, a:b] @ beta[a:b] for _, a, b in spec.partition], axis=1)
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_homogeneity_in_branch1(model, rng):
    s1, s2, x = rng.normal(size=4), rng.normal(size=3), rng.normal(size=(5, 3))
    base = O.deeponet_forward(model, s1, s2, x)
    b = model.branch1
    b.view("output", "weight")[...] *= 3.0
    b.view("output", "bias")[...] *= 3.0
    assert np.allclose(O.deeponet_forward(model, s1, s2, x), 3.0 * base, rtol=1e-12, atol=1e-14)


def test_permuting_partition_permutes_outputs(rng):
    spec = make_spec()
    perm = (("p", 0, 2), ("v1", 2, 4), ("v2", 4, 6), ("v3", 6, 8))
    a = O.OperatorModel(spec)
    b = O.OperatorModel(O.OperatorSpec(spec.branch1, spec.branch2, spec.trunk, perm), stores=[s.copy() for s in a.stores])
    s1, s2, x = rng.normal(size=4), rng.normal(size=3), rng.normal(size=(3, 3))
    ya, yb = O.deeponet_forward(a, s1, s2, x), O.deeponet_forward(b, s1, s2, x)
    # feature block k goes to output perm[k] in b, to OUTPUTS[k] in a
    for k, (name, _, _) in enumerate(perm):
        assert np.array_equal(yb[:, O.OUTPUTS.index(name)], ya[:, k])


@pytest.mark.parametrize(
    "partition",
    [
        (("v1", 0, 2), ("v2", 2, 4), ("v3", 4, 6)),
        (("v1", 0, 2), ("v2", 2, 4), ("v3", 4, 6), ("p", 5, 8)),
        (("v1", 0, 2), ("v2", 2, 4), ("v3", 4, 6), ("p", 6, 7)),
        (("v1", 0, 2), ("v1", 2, 4), ("v3", 4, 6), ("p", 6, 8)),
    ],
)
def test_partition_validation(partition):
    with pytest.raises(ConfigurationError):
        make_spec(partition=partition)


def test_width_validation():
    b1 = nn.NetworkSpec(4, 8)
    with pytest.raises(ConfigurationError):
        O.OperatorSpec(b1, nn.NetworkSpec(3, 12), nn.NetworkSpec(3, 8), O.even_partition(8))
    with pytest.raises(ConfigurationError):
        O.OperatorSpec(b1, nn.NetworkSpec(3, 8), nn.NetworkSpec(2, 8), O.even_partition(8))
    with pytest.raises(ConfigurationError):
        O.even_partition(10)


def test_sensor_width_mismatch(model):
    with pytest.raises(ConfigurationError):
        model.forward(np.zeros(5), np.zeros(3), np.zeros((1, 3)))


def test_input_derivatives_vs_fd(model, rng):
    s1, s2 = rng.normal(size=4), rng.normal(size=3)
    x = rng.normal(size=(6, 3)) * 0.5
    d1, d2 = O.operator_input_derivatives(model, s1, s2, x)
    f = lambda y: O.deeponet_forward(model, s1, s2, y)  # noqa: E731
    h1, h2 = 1e-5, 1e-3
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0
        fd1 = (f(x + h1 * e) - f(x - h1 * e)) / (2 * h1)
        fd2 = (f(x + h2 * e) - 2 * f(x) + f(x - h2 * e)) / h2**2
        assert np.allclose(d1[:, :, j], fd1, rtol=1e-5, atol=1e-9)
        assert np.allclose(d2[:, :, j], fd2, rtol=1e-4, atol=1e-6)


def test_zero_branch_product_zero_derivatives(model, rng):
    b = model.branch1
    b.view("output", "weight")[...] = 0.0
    b.view("output", "bias")[...] = 0.0
    d1, d2 = O.operator_input_derivatives(model, rng.normal(size=4), rng.normal(size=3), rng.normal(size=(3, 3)))
    assert not d1.any() and not d2.any()


def test_derivatives_flow_only_through_trunk(model, rng):
    s1, s2 = rng.normal(size=4), rng.normal(size=3)
    x = rng.normal(size=(5, 3))
    d1, _ = O.operator_input_derivatives(model, s1, s2, x)
    beta = nn.forward(model.branch1, s1) * nn.forward(model.branch2, s2)
    J = nn.forward_jet(model.trunk, x, order=2)
    want = np.einsum("jbq,q,qo->boj", J[1:4], beta, model.S)
    assert np.allclose(d1, want, rtol=1e-14, atol=1e-15)


def test_backprop_through_operator_vs_fd(model, rng):
    from hfnn.autodiff import backprop
    from hfnn.autodiff import tensor as T

    s1, s2 = rng.normal(size=(2, 4)), rng.normal(size=(2, 3))
    x = rng.normal(size=(5, 3))
    index = np.array([0, 1, 1, 0, 1])

    def loss(leaves=None):
        out = model.forward(s1, s2, x, index=index, order=2, leaves=leaves)
        return T.tsum(T.square(out)) if leaves is not None else float(np.sum(out**2))

    leaves = model.leaves()
    g = np.concatenate([np.ravel(a) for a in backprop(loss(leaves), leaves)])
    h = 1e-6
    for i in rng.choice(model.theta.size, 20, replace=False):
        o = model.theta[i]
        model.theta[i] = o + h
        a = loss()
        model.theta[i] = o - h
        b = loss()
        model.theta[i] = o
        assert g[i] == pytest.approx((a - b) / (2 * h), rel=1e-4, abs=1e-7)


# -- sensors and triplets ----------------------------------------------------


def test_vogel_disc(pipe):
    pts = O.vogel_disc(64, pipe.R, 0.0)
    assert np.array_equal(pts[0], [0.0, 0.0, 0.0])
    assert np.all(np.hypot(pts[:, 0], pts[:, 2]) < pipe.R)
    assert np.all(pts[:, 1] == 0.0)


def _clouds(N, Pts, V=None, seed=0):
    dom = G.DomainSpec("straight-pipe")
    counts = {k: Pts for k in ("inlet", "wall", "outlet", "volume")}
    Vs = V or list(np.linspace(0.04, 0.15, N))
    return [G.sample_domain(dom, counts, seed=seed, fluid=FluidParams(V=v)) for v in Vs], dom


def test_triplet_shapes_example():
    clouds, dom = _clouds(2, 3)
    trip = O.build_triplets(clouds, O.SensorLayout.for_domain(dom, 4, 5))["volume"]
    assert trip.coordinates.shape == (6, 3)
    assert trip.sensors1.shape == (6, 4)
    assert trip.sensors2.shape == (6, 5)
    assert trip.targets.shape == (6, 4)


@pytest.mark.parametrize("N", [1, 2, 8])
@pytest.mark.parametrize("Pts", [1, 5, 100])
def test_triplet_repetition_rule(N, Pts):
    clouds, dom = _clouds(N, Pts)
    for name, trip in O.build_triplets(clouds, O.SensorLayout.for_domain(dom, 6, 3)).items():
        n = len(clouds[0][name])
        assert len(trip) == N * n
        if n == 0:
            continue
        for i in range(N):
            rows = trip.sensors1[trip.index == i]
            assert (rows == rows[0]).all()
            assert (trip.sensors2[trip.index == i] == trip.sensors2[trip.index == i][0]).all()


def test_centre_sensor_gets_v():
    clouds, dom = _clouds(1, 4, V=[0.1])
    trip = O.build_triplets(clouds, O.SensorLayout.for_domain(dom))["inlet"]
    assert trip.instance_sensors1[0, 0] == 0.1


def test_triplet_geometry_mismatch():
    a, _ = _clouds(1, 4, V=[0.1], seed=0)
    b, _ = _clouds(1, 4, V=[0.12], seed=1)
    with pytest.raises(ConfigurationError):
        O.build_triplets(a + b, O.SensorLayout.for_domain(G.DomainSpec()))


def test_triplet_masks_follow_strata():
    clouds, dom = _clouds(2, 5)
    t = O.build_triplets(clouds, O.SensorLayout.for_domain(dom, 4, 4))
    assert t["inlet"].mask[:, :3].all() and not t["inlet"].mask[:, 3].any()
    assert not t["volume"].mask.any()


def test_triplet_export_roundtrip(tmp_path):
    clouds, dom = _clouds(3, 5)
    trip = O.build_triplets(clouds, O.SensorLayout.for_domain(dom, 4, 3))["inlet"]
    O.export_triplets(trip, tmp_path)
    for n in ("coordinates", "sensors1", "sensors2", "targets", "index"):
        assert (tmp_path / f"{n}.csv").exists()
    back = O.load_triplets(tmp_path)
    assert np.array_equal(back.coordinates, trip.coordinates)
    assert np.array_equal(back.sensors1, trip.sensors1)
    assert np.array_equal(back.sensors2, trip.sensors2)
    assert np.array_equal(back.targets, trip.targets)
    assert np.array_equal(back.mask, trip.mask)
    assert np.array_equal(back.index, trip.index)


def test_triplet_load_rejects_bad_files(tmp_path):
    clouds, dom = _clouds(2, 3)
    trip = O.build_triplets(clouds, O.SensorLayout.for_domain(dom, 4, 3))["inlet"]
    O.export_triplets(trip, tmp_path)
    lines = (tmp_path / "targets.csv").read_text().splitlines()
    (tmp_path / "targets.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValidationError, match="row counts"):
        O.load_triplets(tmp_path)
    O.export_triplets(trip, tmp_path)
    lines = (tmp_path / "sensors1.csv").read_text().splitlines()
    lines[1] = ",".join(["9.0"] * 4)
    (tmp_path / "sensors1.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="repeated"):
        O.load_triplets(tmp_path)


def test_operator_checkpoint_roundtrip(tmp_path, fluid, pipe):
    m = O.OperatorModel(
        make_spec(),
        scaling=Scaling.for_fluid(fluid, V_ref=0.1),
        sensors=O.SensorLayout.for_domain(pipe, 4, 3),
        R=pipe.R,
        p_out=2.5,
    )
    m.theta += np.random.default_rng(1).normal(size=m.theta.size) * 0.01
    path = tmp_path / "op.bin"
    O.save_operator(path, m, lambdas=np.array([1.0, 2.0, 3.0]))
    back, extras = O.load_operator(path, with_extras=True)
    assert O.operator_dumps(back) == O.operator_dumps(m)
    assert back.spec == m.spec
    assert back.p_out == 2.5 and back.R == pipe.R
    assert np.array_equal(back.sensors.inlet, m.sensors.inlet)
    assert np.array_equal(extras["lambdas"], [1.0, 2.0, 3.0])
    x = np.array([[0.0, 0.1, 0.0], [0.003, 0.2, -0.002]])
    for a, b in zip(back.predict(x, V=0.08), m.predict(x, V=0.08)):
        assert np.array_equal(a, b)


def test_load_operator_bad_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"HFNN" + bytes(16))
    with pytest.raises(ConfigurationError):
        O.load_operator(p)


def test_branch2_bias_initialised_to_one():
    m = O.OperatorModel(make_spec())
    assert np.all(m.branch2.view("output", "bias") == 1.0)
    out = O.deeponet_forward(m, np.ones(4), np.zeros(3), np.zeros((2, 3)) + 0.1)
    assert np.any(out != 0.0)


@given(st.lists(st.floats(0.01, 0.3), min_size=1, max_size=4), st.integers(1, 16))
def test_sensor_rows_are_scaled_profiles(Vs, m1):
    dom = G.DomainSpec()
    layout = O.SensorLayout.for_domain(dom, m1, 2)
    clouds = [G.sample_domain(dom, {"inlet": 2}, seed=0, fluid=FluidParams(V=v)) for v in Vs]
    trip = O.build_triplets(clouds, layout)["inlet"]
    base = trip.instance_sensors1[0] / Vs[0]
    for i, v in enumerate(Vs):
        assert np.allclose(trip.instance_sensors1[i], v * base, rtol=1e-12, atol=0)
