"""Multi-input, multi-output DeepONet and the triplet dataset layout.

Two branch networks encode the inlet-velocity and outlet-pressure functions
sampled at fixed sensors; a trunk network encodes the query point. The merged
feature ``beta1 * beta2 * tau`` (width ``q``) is summed over one index range
per output, so each of ``v1, v2, v3, p`` owns a slice of the features.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import checkpoint, nn
from .autodiff import tensor as T
from .errors import ConfigurationError, ValidationError
from .geometry import STRATA, StratifiedPointCloud, radius_profile
from .physics import nse_residual_jet, parabolic_inlet

OUTPUTS = ("v1", "v2", "v3", "p")
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class OperatorSpec:
    branch1: nn.NetworkSpec
    branch2: nn.NetworkSpec
    trunk: nn.NetworkSpec
    partition: tuple  # ((name, start, stop), ...) with 0-based half-open ranges

    def __post_init__(self):
        q = self.trunk.output_dim
        problems = []
        if self.trunk.input_dim != 3:
            problems.append("trunk input_dim must be 3")
        if self.branch1.output_dim != q or self.branch2.output_dim != q:
            problems.append("branch and trunk output widths must all equal q")
        names = [p[0] for p in self.partition]
        if sorted(names) != sorted(OUTPUTS):
            problems.append(f"partition must name each of {OUTPUTS} exactly once")
        ranges = sorted((int(a), int(b)) for _, a, b in self.partition)
        pos = 0
        for a, b in ranges:
            if a != pos or b <= a:
                problems.append("partition ranges must be disjoint, contiguous and non-empty")
                break
            pos = b
        if pos != q and not problems:
            problems.append(f"partition covers [0, {pos}) but q = {q}")
        if problems:
            raise ConfigurationError("invalid OperatorSpec: " + "; ".join(problems))

    @property
    def q(self) -> int:
        return self.trunk.output_dim

    @property
    def m1(self) -> int:
        return self.branch1.input_dim

    @property
    def m2(self) -> int:
        return self.branch2.input_dim

    def range_of(self, name):
        for n, a, b in self.partition:
            if n == name:
                return int(a), int(b)
        raise KeyError(name)


def even_partition(q, names=OUTPUTS):
    k = len(names)
    if q % k:
        raise ConfigurationError(f"q={q} is not divisible by {k}")
    w = q // k
    return tuple((n, i * w, (i + 1) * w) for i, n in enumerate(names))


def partition_matrix(spec: OperatorSpec) -> np.ndarray:
    """``(q, 4)`` 0/1 matrix summing each output's feature range."""
    S = np.zeros((spec.q, len(OUTPUTS)))
    for o, name in enumerate(OUTPUTS):
        a, b = spec.range_of(name)
        S[a:b, o] = 1.0
    return S


class OperatorModel:
    """Parameters of the three sub-networks in one flat vector."""

    def __init__(self, spec: OperatorSpec, stores=None, scaling=None, sensors=None, R=None, p_out=0.0):
        self.spec = spec
        if stores is None:
            stores = [nn.init(s) for s in (spec.branch1, spec.branch2, spec.trunk)]
            # a constant-zero outlet input would otherwise give beta2 == 0 and a dead merge
            stores[1].view("output", "bias")[:] = 1.0
        sizes = [s.size for s in stores]
        self.theta = np.concatenate([s.theta for s in stores])
        offs = np.cumsum([0] + sizes)
        self.stores = [
            nn.ParamStore(s.spec, self.theta[a:b], list(s.layout), s.B) for s, a, b in zip(stores, offs[:-1], offs[1:])
        ]
        for st in self.stores:
            assert np.shares_memory(st.theta, self.theta)
        self.S = partition_matrix(spec)
        self.scaling = scaling
        self.sensors = sensors
        self.R = R
        self.p_out = float(p_out)

    @property
    def branch1(self):
        return self.stores[0]

    @property
    def branch2(self):
        return self.stores[1]

    @property
    def trunk(self):
        return self.stores[2]

    def leaves(self):
        return [t for s in self.stores for t in s.leaves()]

    def split_leaves(self, leaves):
        if leaves is None:
            return None, None, None
        n1, n2 = len(self.branch1.layout), len(self.branch2.layout)
        return leaves[:n1], leaves[n1 : n1 + n2], leaves[n1 + n2 :]

    # -- evaluation in the model frame ------------------------------------

    def branch_product(self, s1, s2, leaves=None):
        """``beta1 * beta2`` per function instance, ``(N, q)``."""
        l1, l2, _ = self.split_leaves(leaves)
        b1 = nn.forward_jet(self.branch1, np.atleast_2d(s1), order=0, leaves=l1)[0]
        b2 = nn.forward_jet(self.branch2, np.atleast_2d(s2), order=0, leaves=l2)[0]
        return T.mul(b1, b2)

    def merge(self, P, index, x, order=0, leaves=None):
        """Output jet ``(K, B, 4)`` for rows ``x`` drawing instance ``index[b]``."""
        _, _, lt = self.split_leaves(leaves)
        tau = nn.forward_jet(self.trunk, x, order=order, leaves=lt)
        rows = T.take_rows(P, index) if isinstance(P, T.Tensor) else P[index]
        Z = T.mul(tau, rows[None] if not isinstance(rows, T.Tensor) else T.reshape(rows, (1,) + rows.shape))
        return T.jet_affine(Z, self.S)

    def forward(self, s1, s2, x, index=None, order=0, leaves=None):
        s1, s2 = np.atleast_2d(s1), np.atleast_2d(s2)
        if s1.shape[1] != self.spec.m1 or s2.shape[1] != self.spec.m2:
            raise ConfigurationError("sensor row width does not match the branch inputs")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if index is None:
            index = np.zeros(len(x), dtype=np.int64) if len(s1) == 1 else np.arange(len(x))
        P = self.branch_product(s1, s2, leaves)
        return self.merge(P, np.asarray(index), x, order, leaves)

    # -- SI convenience ----------------------------------------------------

    def sensor_rows(self, V):
        """SI sensor rows for maximum inlet velocity ``V`` (internal data)."""
        if self.sensors is None or self.R is None:
            raise ConfigurationError("model has no sensor layout attached")
        s1 = parabolic_inlet(self.sensors.inlet, V, self.R)[:, 1]
        s2 = np.full(len(self.sensors.outlet), self.p_out)
        return s1, s2

    def predict(self, x_si, V=None, s1=None, s2=None, chunk=100_000):
        """SI ``(v, p)`` at query points for one function instance."""
        sc = self.scaling
        if s1 is None:
            s1, s2 = self.sensor_rows(V)
        s1s = np.asarray(s1) / sc.velocity
        s2s = np.asarray(s2) / sc.pressure
        P = self.branch_product(s1s[None], s2s[None])
        x_si = np.atleast_2d(np.asarray(x_si, dtype=np.float64))
        out = np.empty((len(x_si), 4))
        for a in range(0, len(x_si), chunk):
            xs = sc.x(x_si[a : a + chunk])
            out[a : a + chunk] = self.merge(P, np.zeros(len(xs), dtype=np.int64), xs)[0]
        out = sc.to_si(out)
        return out[:, :3], out[:, 3]


def deeponet_forward(model: OperatorModel, sensors1_row, sensors2_row, x):
    """Outputs ``(v1, v2, v3, p)`` at one or more query points (model frame)."""
    out = model.forward(sensors1_row, sensors2_row, x)[0]
    return out[0] if np.ndim(x) == 1 else out


def operator_input_derivatives(model: OperatorModel, sensors1, sensors2, x):
    """First and pure second input derivatives, each ``(B, 4, 3)``."""
    J = model.forward(sensors1, sensors2, x, order=2)
    d1 = np.transpose(J[1:4], (1, 2, 0))
    d2 = np.transpose(J[4:7], (1, 2, 0))
    return d1, d2


# ---------------------------------------------------------------------------
# sensors and triplets
# ---------------------------------------------------------------------------


def vogel_disc(m, radius, x2):
    """``m`` near-uniform points on a disc (sunflower spiral, first at the centre)."""
    k = np.arange(m)
    r = radius * np.sqrt(k / m)
    th = k * GOLDEN_ANGLE
    return np.stack([r * np.cos(th), np.full(m, float(x2)), r * np.sin(th)], axis=1)


@dataclass
class SensorLayout:
    inlet: np.ndarray
    outlet: np.ndarray

    @classmethod
    def for_domain(cls, domain, m1=64, m2=64):
        return cls(vogel_disc(m1, domain.R, 0.0), vogel_disc(m2, float(radius_profile(domain, domain.length)), domain.length))


@dataclass
class OperatorTriplet:
    """Row-wise (coordinates, sensors1, sensors2, targets) with instance index.

    Sensor rows are stored once per instance and expanded on access, so the
    repetition rule holds by construction.
    """

    coordinates: np.ndarray
    instance_sensors1: np.ndarray
    instance_sensors2: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    index: np.ndarray
    V: np.ndarray

    def __len__(self):
        return len(self.coordinates)

    @property
    def sensors1(self):
        return self.instance_sensors1[self.index]

    @property
    def sensors2(self):
        return self.instance_sensors2[self.index]

    @property
    def n_instances(self):
        return len(self.instance_sensors1)


def _outlet_pressures(cloud: StratifiedPointCloud, pts):
    if cloud.truth is not None:
        return np.asarray(cloud.truth(pts)[1], dtype=np.float64)
    out = cloud["outlet"]
    have = out.mask[:, 3]
    if not have.any():
        raise ConfigurationError("no outlet pressure available for the second branch input")
    xo = out.x[have]
    d = ((pts[:, None, :] - xo[None, :, :]) ** 2).sum(axis=-1)
    return out.p[have][np.argmin(d, axis=1)]


def build_triplets(clouds, sensors: SensorLayout):
    """Per-stratum triplets for a list of clouds that share one geometry."""
    clouds = list(clouds)
    if not clouds:
        raise ConfigurationError("need at least one cloud")
    ref = clouds[0]
    for c in clouds[1:]:
        if ref.domain != c.domain or any(
            not np.array_equal(ref[k].x, c[k].x) for k in ("inlet", "wall", "outlet", "volume")
        ):
            raise ConfigurationError("clouds do not share the same geometry")
    R = ref.domain.R if ref.domain is not None else float(np.hypot(ref["inlet"].x[:, 0], ref["inlet"].x[:, 2]).max())
    s1 = np.stack([parabolic_inlet(sensors.inlet, c.V, R)[:, 1] for c in clouds])
    s2 = np.stack([_outlet_pressures(c, sensors.outlet) for c in clouds])
    V = np.array([c.V for c in clouds], dtype=np.float64)
    out = {}
    for name in STRATA:
        parts = [c[name] for c in clouds]
        out[name] = OperatorTriplet(
            coordinates=np.concatenate([p.x for p in parts]),
            instance_sensors1=s1,
            instance_sensors2=s2,
            targets=np.concatenate([p.values for p in parts]),
            mask=np.concatenate([p.mask for p in parts]),
            index=np.concatenate([np.full(len(p), i, dtype=np.int64) for i, p in enumerate(parts)]),
            V=V,
        )
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def export_triplets(trip: OperatorTriplet, directory):
    os.makedirs(directory, exist_ok=True)
    fmt = lambda a: [repr(float(v)) for v in a]  # noqa: E731
    _write_csv(os.path.join(directory, "coordinates.csv"), ["x1", "x2", "x3"], (fmt(r) for r in trip.coordinates))
    m1, m2 = trip.instance_sensors1.shape[1], trip.instance_sensors2.shape[1]
    _write_csv(os.path.join(directory, "sensors1.csv"), [f"u{k}" for k in range(m1)], (fmt(r) for r in trip.sensors1))
    _write_csv(os.path.join(directory, "sensors2.csv"), [f"p{k}" for k in range(m2)], (fmt(r) for r in trip.sensors2))
    _write_csv(
        os.path.join(directory, "targets.csv"),
        list(OUTPUTS),
        ([repr(float(v)) if m else "" for v, m in zip(r, mk)] for r, mk in zip(trip.targets, trip.mask)),
    )
    _write_csv(
        os.path.join(directory, "index.csv"),
        ["instance", "V"],
        ([str(int(i)), repr(float(trip.V[i]))] for i in trip.index),
    )


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    return rows[0], rows[1:]


def load_triplets(directory) -> OperatorTriplet:
    names = ["coordinates", "sensors1", "sensors2", "targets", "index"]
    data = {n: _read_csv(os.path.join(directory, f"{n}.csv"))[1] for n in names}
    counts = {n: len(r) for n, r in data.items()}
    if len(set(counts.values())) != 1:
        raise ValidationError(f"row counts differ between triplet files: {counts}")
    idx = np.array([int(r[0]) for r in data["index"]], dtype=np.int64)
    Vrow = np.array([float(r[1]) for r in data["index"]])
    n = int(idx.max()) + 1 if len(idx) else 0
    s1 = np.array(data["sensors1"], dtype=np.float64)
    s2 = np.array(data["sensors2"], dtype=np.float64)
    inst1 = np.zeros((n, s1.shape[1] if s1.ndim == 2 else 0))
    inst2 = np.zeros((n, s2.shape[1] if s2.ndim == 2 else 0))
    V = np.zeros(n)
    for i in range(n):
        rows = np.nonzero(idx == i)[0]
        if len(rows) == 0:
            continue
        if not (np.all(s1[rows] == s1[rows[0]]) and np.all(s2[rows] == s2[rows[0]])):
            raise ValidationError(f"instance {i}: sensor rows are not repeated identically")
        inst1[i], inst2[i], V[i] = s1[rows[0]], s2[rows[0]], Vrow[rows[0]]
    tg = data["targets"]
    mask = np.array([[c.strip() != "" for c in r] for r in tg], dtype=bool).reshape(-1, 4)
    vals = np.array([[float(c) if c.strip() else 0.0 for c in r] for r in tg]).reshape(-1, 4)
    return OperatorTriplet(
        coordinates=np.array(data["coordinates"], dtype=np.float64).reshape(-1, 3),
        instance_sensors1=inst1,
        instance_sensors2=inst2,
        targets=vals,
        mask=mask,
        index=idx,
        V=V,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

OP_MAGIC = b"HFOP"


def _header(model: OperatorModel) -> str:
    lines = ["partition=" + ",".join(f"{n}:{a}:{b}" for n, a, b in model.spec.partition)]
    if model.scaling is not None:
        lines.append("scaling=" + model.scaling.to_text())
    if model.R is not None:
        lines.append(f"R={model.R!r}")
    lines.append(f"p_out={model.p_out!r}")
    if model.sensors is not None:
        lines.append("sensors1=" + " ".join(repr(float(v)) for v in model.sensors.inlet.ravel()))
        lines.append("sensors2=" + " ".join(repr(float(v)) for v in model.sensors.outlet.ravel()))
    return "\n".join(lines) + "\n"


def save_operator(path, model: OperatorModel, lambdas=None):
    text = _header(model).encode("utf-8")
    with open(path, "wb") as f:
        f.write(OP_MAGIC)
        f.write(struct.pack("<II", checkpoint.VERSION, len(text)))
        f.write(text)
        for st in model.stores:
            checkpoint.write_network(f, st)
        if lambdas is not None:
            checkpoint.write_lambdas(f, lambdas)


def load_operator(path, with_extras=False):
    from .training.problems import Scaling

    with open(path, "rb") as f:
        if f.read(4) != OP_MAGIC:
            raise ConfigurationError("not an operator checkpoint (bad magic)")
        _, n = struct.unpack("<II", f.read(8))
        head = dict(line.split("=", 1) for line in f.read(n).decode("utf-8").splitlines() if line)
        stores = [checkpoint.read_network(f) for _ in range(3)]
        extras = checkpoint.read_extras(f, 0)
    partition = tuple((p.split(":")[0], int(p.split(":")[1]), int(p.split(":")[2])) for p in head["partition"].split(","))
    spec = OperatorSpec(stores[0].spec, stores[1].spec, stores[2].spec, partition)
    sensors = None
    if "sensors1" in head:
        sensors = SensorLayout(
            np.array(head["sensors1"].split(), dtype=np.float64).reshape(-1, 3),
            np.array(head["sensors2"].split(), dtype=np.float64).reshape(-1, 3),
        )
    model = OperatorModel(
        spec,
        stores,
        scaling=Scaling.from_text(head["scaling"]) if "scaling" in head else None,
        sensors=sensors,
        R=float(head["R"]) if "R" in head else None,
        p_out=float(head.get("p_out", 0.0)),
    )
    return (model, extras) if with_extras else model


def operator_dumps(model) -> bytes:
    buf = io.BytesIO()
    for st in model.stores:
        checkpoint.write_network(buf, st)
    return buf.getvalue()


def operator_residual(model: OperatorModel, x_si, V, chunk=20_000):
    """Frame NSE residuals ``(n, 4)`` at SI points for inlet velocity ``V``."""
    sc = model.scaling
    s1, s2 = model.sensor_rows(V)
    P = model.branch_product((np.asarray(s1) / sc.velocity)[None], (np.asarray(s2) / sc.pressure)[None])
    x_si = np.atleast_2d(np.asarray(x_si, dtype=np.float64))
    out = np.empty((len(x_si), 4))
    for a in range(0, len(x_si), chunk):
        xs = sc.x(x_si[a : a + chunk])
        O = model.merge(P, np.zeros(len(xs), dtype=np.int64), xs, order=2)
        out[a : a + chunk] = nse_residual_jet(O, sc.c_conv, sc.c_visc)
    return out
