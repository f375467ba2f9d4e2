"""Network architectures over a flat parameter vector.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``X`` of shape
``(B, fan_in)`` maps through ``X @ W + b``. With random weight factorization a
layer stores a per-output-neuron scale ``s`` and a direction matrix ``v`` and
its effective weight is ``s[None, :] * v``.

Three evaluation paths share one parameter layout:

* :func:`forward` / :func:`forward_jet` run batched jets (training path);
* :func:`tape_forward` builds the same network on a scalar :class:`Tape`
  (reference path, used by tests and by :func:`hfnn.physics.nse_residual`).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import tape as _tape
from .autodiff import tensor as T
from .errors import ConfigurationError, UsageError

KINDS = ("mlp", "modified-mlp")
EMBEDDINGS = ("none", "fourier")
FACTORIZATIONS = ("none", "rwf")


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden_layers: int = 4
    hidden_width: int = 64
    kind: str = "mlp"
    activation: str = "tanh"
    embedding: str = "none"
    fourier_e: int = 128
    fourier_sigma: float = 1.0
    factorization: str = "none"
    rwf_mu: float = 0.5
    rwf_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.input_dim < 1 or self.output_dim < 1:
            problems.append("input_dim and output_dim must be >= 1")
        if self.hidden_layers < 1:
            problems.append("hidden_layers must be >= 1")
        if self.hidden_width < 1:
            problems.append("hidden_width must be >= 1")
        if self.kind not in KINDS:
            problems.append(f"kind must be one of {KINDS}")
        if self.activation != "tanh":
            problems.append("only tanh activation is supported")
        if self.embedding not in EMBEDDINGS:
            problems.append(f"embedding must be one of {EMBEDDINGS}")
        if self.embedding == "fourier" and self.fourier_e < 1:
            problems.append("fourier_e must be >= 1")
        if self.factorization not in FACTORIZATIONS:
            problems.append(f"factorization must be one of {FACTORIZATIONS}")
        if problems:
            raise ConfigurationError("invalid NetworkSpec: " + "; ".join(problems))

    @property
    def feature_dim(self) -> int:
        """Width of the first affine layer's input."""
        return 2 * self.fourier_e if self.embedding == "fourier" else self.input_dim

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> NetworkSpec:
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in kinds:
                raise ConfigurationError(f"unknown NetworkSpec field {key!r}")
            typ = kinds[key]
            if typ in ("int", int):
                values[key] = int(raw)
            elif typ in ("float", float):
                values[key] = float(raw)
            else:
                values[key] = raw.strip()
        return cls(**values)


@dataclass(frozen=True)
class LayoutEntry:
    layer: str
    role: str  # weight | bias | scale-s | direction-v
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _layers(spec: NetworkSpec):
    """(name, fan_in, fan_out) for every affine layer, in layout order."""
    W, d = spec.hidden_width, spec.feature_dim
    out = []
    if spec.kind == "modified-mlp":
        out += [("encoder-U", d, W), ("encoder-V", d, W)]
    for l in range(spec.hidden_layers):
        out.append((f"hidden{l}", d if l == 0 else W, W))
    out.append(("output", W, spec.output_dim))
    return out


def build_layout(spec: NetworkSpec) -> list[LayoutEntry]:
    entries, off = [], 0
    for name, fi, fo in _layers(spec):
        if spec.factorization == "rwf":
            roles = [("scale-s", (fo,)), ("direction-v", (fi, fo))]
        else:
            roles = [("weight", (fi, fo))]
        roles.append(("bias", (fo,)))
        for role, shape in roles:
            e = LayoutEntry(name, role, off, shape)
            entries.append(e)
            off += e.size
    return entries


@dataclass
class ParamStore:
    spec: NetworkSpec
    theta: np.ndarray
    layout: list = field(default_factory=list)
    B: np.ndarray | None = None

    def __post_init__(self):
        if not self.layout:
            self.layout = build_layout(self.spec)
        n = sum(e.size for e in self.layout)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (n,):
            raise ConfigurationError(f"parameter vector has {self.theta.size} entries, layout needs {n}")
        self._index = {(e.layer, e.role): e for e in self.layout}

    @property
    def size(self) -> int:
        return self.theta.size

    def view(self, layer, role):
        e = self._index[(layer, role)]
        return self.theta[e.offset : e.offset + e.size].reshape(e.shape)

    def copy(self) -> ParamStore:
        return ParamStore(
            self.spec, self.theta.copy(), list(self.layout), None if self.B is None else self.B.copy()
        )

    def leaves(self):
        """One :class:`Tensor` per layout entry, each wrapping a view of ``theta``."""
        return [T.Tensor(self.view(e.layer, e.role), name=f"{e.layer}.{e.role}") for e in self.layout]

    def flatten_grads(self, grads) -> np.ndarray:
        return np.concatenate([np.asarray(g).reshape(-1) for g in grads])


def xavier_std(fan_in, fan_out):
    return math.sqrt(2.0 / (fan_in + fan_out))


def init(spec: NetworkSpec) -> ParamStore:
    """Xavier-normal weights, zero biases; optional RWF split and Fourier matrix."""
    rng = np.random.default_rng(spec.seed)
    B = None
    if spec.embedding == "fourier":
        B = rng.normal(0.0, spec.fourier_sigma, size=(spec.fourier_e, spec.input_dim))
    store = ParamStore(spec, np.zeros(sum(e.size for e in build_layout(spec))), B=B)
    for name, fi, fo in _layers(spec):
        w = rng.normal(0.0, xavier_std(fi, fo), size=(fi, fo))
        if spec.factorization == "rwf":
            s = np.exp(rng.normal(spec.rwf_mu, spec.rwf_sigma, size=fo))
            store.view(name, "scale-s")[...] = s
            store.view(name, "direction-v")[...] = w / s[None, :]
        else:
            store.view(name, "weight")[...] = w
    return store


def fourier_embed(x, B):
    """``[cos(2 pi B x), sin(2 pi B x)]`` for one point ``x`` or a batch (rows)."""
    a = 2.0 * np.pi * (np.asarray(x, dtype=np.float64) @ np.asarray(B).T)
    return np.concatenate([np.cos(a), np.sin(a)], axis=-1)


def effective_weights(store: ParamStore):
    """Materialized ``w = s * v`` for every layer (layout order)."""
    if store.spec.factorization != "rwf":
        raise UsageError("effective_weights() needs a store with rwf factorization")
    return [
        store.view(name, "scale-s")[None, :] * store.view(name, "direction-v")
        for name, _, _ in _layers(store.spec)
    ]


def materialize(store: ParamStore) -> ParamStore:
    """Plain (non-factorized) store computing the same function as an rwf store."""
    spec = dataclasses.replace(store.spec, factorization="none")
    out = ParamStore(spec, np.zeros(sum(e.size for e in build_layout(spec))), B=store.B)
    for (name, _, _), w in zip(_layers(spec), effective_weights(store)):
        out.view(name, "weight")[...] = w
        out.view(name, "bias")[...] = store.view(name, "bias")
    return out


# ---------------------------------------------------------------------------
# batched jet evaluation
# ---------------------------------------------------------------------------


def _weights(store, leaves):
    """Per-layer (W, b) as Tensors (when ``leaves`` given) or arrays."""
    spec = store.spec
    if leaves is None:
        get = store.view
    else:
        lookup = {(e.layer, e.role): t for e, t in zip(store.layout, leaves)}
        get = lambda layer, role: lookup[(layer, role)]  # noqa: E731
    out = {}
    for name, _, _ in _layers(spec):
        if spec.factorization == "rwf":
            s = get(name, "scale-s")
            v = get(name, "direction-v")
            w = T.mul(T.reshape(s, (1, -1)) if isinstance(s, T.Tensor) else s[None, :], v)
        else:
            w = get(name, "weight")
        out[name] = (w, get(name, "bias"))
    return out


def features_jet(store: ParamStore, x, order=2):
    if store.spec.embedding == "fourier":
        return T.fourier_seed_jet(x, store.B, order)
    return T.input_jet(x, order)


def forward_jet(store: ParamStore, x, order=2, leaves=None):
    """Network output jet of shape ``(K, B, output_dim)``.

    ``x`` is a ``(B, input_dim)`` array or an already-seeded feature jet
    (3-d array). Pass ``leaves`` (from :meth:`ParamStore.leaves`) to get a
    :class:`Tensor` connected to the parameters.
    """
    spec = store.spec
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, T.Tensor) else x
    if isinstance(x, np.ndarray) and x.ndim == 2:
        if x.shape[1] != spec.input_dim:
            raise ConfigurationError(f"expected {spec.input_dim} input columns, got {x.shape[1]}")
        h = features_jet(store, x, order)
    else:
        h = x
    wb = _weights(store, leaves)
    if spec.kind == "modified-mlp":
        U = T.jet_tanh(T.jet_affine(h, *wb["encoder-U"]))
        V = T.jet_tanh(T.jet_affine(h, *wb["encoder-V"]))
        for l in range(spec.hidden_layers):
            t = T.jet_tanh(T.jet_affine(h, *wb[f"hidden{l}"]))
            h = T.jet_gate(t, U, V)
    else:
        for l in range(spec.hidden_layers):
            h = T.jet_tanh(T.jet_affine(h, *wb[f"hidden{l}"]))
    return T.jet_affine(h, *wb["output"])


def forward(store: ParamStore, x) -> np.ndarray:
    """Plain batched evaluation, ``(B, input_dim) -> (B, output_dim)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = forward_jet(store, np.atleast_2d(x), order=0)[0]
    return out[0] if single else out


def mlp_forward(store: ParamStore, x) -> np.ndarray:
    if store.spec.kind != "mlp":
        raise UsageError("mlp_forward() needs kind='mlp'")
    return forward(store, x)


def modified_mlp_forward(store: ParamStore, x) -> np.ndarray:
    if store.spec.kind != "modified-mlp":
        raise UsageError("modified_mlp_forward() needs kind='modified-mlp'")
    return forward(store, x)


# ---------------------------------------------------------------------------
# scalar tape evaluation
# ---------------------------------------------------------------------------


def tape_forward(store: ParamStore, xs, param_vars=None):
    """Build the network for one point on a tape.

    ``xs`` holds one :class:`~hfnn.autodiff.Var` (or float) per input
    coordinate. Parameters enter as tape constants unless ``param_vars`` maps
    flat indices of ``theta`` to Vars. Returns the list of output Vars.
    """
    spec = store.spec
    if len(xs) != spec.input_dim:
        raise ConfigurationError(f"expected {spec.input_dim} inputs, got {len(xs)}")
    tp = next((v.tape for v in xs if isinstance(v, _tape.Var)), None)
    if tp is None:
        raise UsageError("tape_forward() needs at least one tape Var among the inputs")
    param_vars = param_vars or {}

    def p(e, idx):
        flat = e.offset + int(np.ravel_multi_index(idx, e.shape))
        v = param_vars.get(flat)
        return v if v is not None else tp.constant(store.theta[flat])

    def affine(h, name):
        fi, fo = _fan(store, name)
        bias = store._index[(name, "bias")]
        out = []
        if spec.factorization == "rwf":
            se, ve = store._index[(name, "scale-s")], store._index[(name, "direction-v")]
        else:
            we = store._index[(name, "weight")]
        for j in range(fo):
            acc = p(bias, (j,))
            for i in range(fi):
                if spec.factorization == "rwf":
                    w = p(se, (j,)) * p(ve, (i, j))
                else:
                    w = p(we, (i, j))
                acc = acc + h[i] * w
            out.append(acc)
        return out

    if spec.embedding == "fourier":
        Bm = store.B
        args = []
        for r in range(Bm.shape[0]):
            a = 0.0
            for i in range(spec.input_dim):
                a = xs[i] * float(2.0 * np.pi * Bm[r, i]) + a
            args.append(a)
        h = [_tape.cos(a) for a in args] + [_tape.sin(a) for a in args]
    else:
        h = list(xs)
    if spec.kind == "modified-mlp":
        U = [u.tanh() for u in affine(h, "encoder-U")]
        V = [v.tanh() for v in affine(h, "encoder-V")]
        for l in range(spec.hidden_layers):
            t = [z.tanh() for z in affine(h, f"hidden{l}")]
            h = [ti * ui + (1.0 - ti) * vi for ti, ui, vi in zip(t, U, V)]
    else:
        for l in range(spec.hidden_layers):
            h = [z.tanh() for z in affine(h, f"hidden{l}")]
    return affine(h, "output")


def _fan(store, name):
    for n, fi, fo in _layers(store.spec):
        if n == name:
            return fi, fo
    raise KeyError(name)


def param_count(spec: NetworkSpec) -> int:
    return sum(e.size for e in build_layout(spec))
