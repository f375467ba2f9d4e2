"""Loss assembly for point-wise networks and for operator networks.

A *problem* owns the scaled training/validation arrays of one run and knows
how to turn a batch into per-term loss nodes. The training loop only sees
``terms``, ``theta``, ``leaves()``, ``sample(rng)``, ``losses(leaves, batch)``
and ``val_metric()``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from ..autodiff import tensor as T
from ..errors import ConfigurationError
from ..physics import DIMENSIONAL, DIMENSIONLESS, FluidParams, nse_residual_jet, reynolds

TERMS = ("data", "inlet", "wall", "outlet", "phy")
LABELLED = ("data", "inlet", "wall", "outlet")
COLLOCATION_STRATA = ("inlet", "wall", "outlet", "volume")


@dataclass(frozen=True)
class Scaling:
    """Maps SI quantities to the frame a network works in."""

    length: float = 1.0
    velocity: float = 1.0
    pressure: float = 1.0
    c_conv: float = 1.0
    c_visc: float = 1.0
    frame: str = DIMENSIONAL

    @classmethod
    def for_fluid(cls, fluid: FluidParams, nondimensional=True, V_ref=None):
        if not nondimensional:
            return cls(1.0, 1.0, 1.0, fluid.rho, fluid.mu, DIMENSIONAL)
        ref = fluid if V_ref is None else fluid.with_velocity(V_ref)
        return cls(ref.D, ref.V, ref.rho * ref.V**2, 1.0, 1.0 / reynolds(ref), DIMENSIONLESS)

    @property
    def out_scale(self):
        return np.array([self.velocity] * 3 + [self.pressure])

    def x(self, x_si):
        return np.asarray(x_si, dtype=np.float64) / self.length

    def targets(self, values_si):
        return np.asarray(values_si, dtype=np.float64) / self.out_scale

    def to_si(self, y):
        return np.asarray(y) * self.out_scale

    def to_text(self):
        return " ".join(f"{k}={getattr(self, k)!r}" for k in self.__dataclass_fields__)

    @classmethod
    def from_text(cls, text):
        vals = dict(kv.split("=", 1) for kv in text.split())
        return cls(**{k: (v.strip("'") if k == "frame" else float(v)) for k, v in vals.items()})


def terms_for(kind, has_data):
    if kind in ("deepnn", "deeponet"):
        return list(LABELLED) if has_data else list(LABELLED[1:])
    if kind in ("pinn", "wu-pinn", "pi-deeponet"):
        return (["data"] if has_data else []) + ["inlet", "wall", "outlet", "phy"]
    raise ConfigurationError(f"unknown model kind {kind!r}")


def _choice(rng, n, size):
    size = min(size, n)
    if size == n:
        return np.arange(n)
    return rng.choice(n, size=size, replace=False)


class _Arrays:
    """Scaled coordinates, targets and mask of one stratum."""

    def __init__(self, x, values, mask, scaling: Scaling, index=None):
        self.x = scaling.x(x)
        self.y = scaling.targets(values)
        self.mask = np.asarray(mask, dtype=bool)
        self.index = index

    def __len__(self):
        return len(self.x)


# ---------------------------------------------------------------------------
# point-wise networks (DeepNN / PINN)
# ---------------------------------------------------------------------------


class PinnModel:
    """A network plus the scaling between SI units and its working frame."""

    def __init__(self, store: nn.ParamStore, scaling: Scaling):
        self.store = store
        self.scaling = scaling

    @property
    def theta(self):
        return self.store.theta

    def leaves(self):
        return self.store.leaves()

    def predict(self, x_si, chunk=100_000):
        """SI velocities ``(n, 3)`` and pressures ``(n,)``."""
        x_si = np.atleast_2d(np.asarray(x_si, dtype=np.float64))
        out = np.empty((len(x_si), 4))
        for a in range(0, len(x_si), chunk):
            out[a : a + chunk] = nn.forward(self.store, self.scaling.x(x_si[a : a + chunk]))
        out = self.scaling.to_si(out)
        return out[:, :3], out[:, 3]

    def residual(self, x_si, chunk=20_000):
        """Frame residuals ``(n, 4)`` at SI points."""
        x_si = np.atleast_2d(np.asarray(x_si, dtype=np.float64))
        out = np.empty((len(x_si), 4))
        for a in range(0, len(x_si), chunk):
            O = nn.forward_jet(self.store, self.scaling.x(x_si[a : a + chunk]), order=2)
            out[a : a + chunk] = nse_residual_jet(O, self.scaling.c_conv, self.scaling.c_visc)
        return out


class PinnProblem:
    """Stratum arrays and loss graph for DeepNN / PINN training."""

    def __init__(self, model: PinnModel, train, val=None, kind="pinn", batch_size=256,
                 outlet_mode="auto", val_phy_points=2048):
        self.model = model
        self.kind = kind
        self.batch_size = int(batch_size)
        sc = model.scaling
        has_data = len(train["data"]) > 0
        self.terms = terms_for(kind, has_data)
        if kind == "deepnn" and not has_data:
            raise ConfigurationError("deepnn training needs a non-empty data stratum")
        if not has_data and "data" in self.terms:
            self.terms.remove("data")
        for name in ("inlet", "wall", "outlet"):
            if not len(train[name]):
                raise ConfigurationError(f"stratum {name!r} is empty")
        if "phy" in self.terms and not len(train["volume"]):
            raise ConfigurationError("stratum 'volume' is empty (needed for collocation)")
        if outlet_mode == "auto":
            outlet_mode = "velocity" if train["outlet"].has_velocity else "derivative"
        if outlet_mode == "derivative" and kind == "deepnn":
            raise ConfigurationError("outlet derivative penalty needs input derivatives; use velocity labels")
        self.outlet_mode = outlet_mode
        self.train = self._arrays(train, sc)
        self.coll = self._pool(self.train)
        self.val = self._arrays(val, sc) if val is not None else None
        if self.val is not None:
            self.val_coll = tuple(None if a is None else a[:val_phy_points] for a in self._pool(self.val))

    @staticmethod
    def _arrays(cloud, sc):
        return {k: _Arrays(cloud[k].x, cloud[k].values, cloud[k].mask, sc) for k in cloud.strata}

    @staticmethod
    def _pool(arrays):
        x = np.concatenate([arrays[k].x for k in COLLOCATION_STRATA], axis=0)
        if arrays["volume"].index is None:
            return x, None
        return x, np.concatenate([arrays[k].index for k in COLLOCATION_STRATA])

    @property
    def theta(self):
        return self.model.theta

    def leaves(self):
        return self.model.leaves()

    # hooks overridden by operator problems
    def _context(self, leaves, arrays):
        return None

    def _net(self, ctx, leaves, x, index, order):
        return nn.forward_jet(self.model.store, x, order=order, leaves=leaves)

    def sample(self, rng):
        batch = {}
        for name in self.terms:
            n = len(self.coll[0]) if name == "phy" else len(self.train[name])
            batch[name] = _choice(rng, n, self.batch_size)
        return batch

    def _losses(self, leaves, arrays, coll, batch):
        sc = self.model.scaling
        ctx = self._context(leaves, arrays)

        def rows(a, idx):
            return None if a is None else a[idx]

        value_terms = [t for t in self.terms if t != "phy" and not (t == "outlet" and self.outlet_mode == "derivative")]
        out = {}
        if value_terms:
            xs = [arrays[t].x[batch[t]] for t in value_terms]
            ids = [rows(arrays[t].index, batch[t]) for t in value_terms]
            ids = None if ids[0] is None else np.concatenate(ids)
            pred = self._net(ctx, leaves, np.concatenate(xs), ids, 0)[0]
            a = 0
            for t, x in zip(value_terms, xs):
                idx = batch[t]
                out[t] = T.masked_mse(pred[a : a + len(x)], arrays[t].y[idx], arrays[t].mask[idx])
                a += len(x)
        need_jet = "phy" in self.terms or ("outlet" in self.terms and self.outlet_mode == "derivative")
        if need_jet:
            parts, ids = [], []
            if "phy" in self.terms:
                parts.append(coll[0][batch["phy"]])
                ids.append(rows(coll[1], batch["phy"]))
            nc = len(parts[0]) if parts else 0
            if "outlet" in self.terms and self.outlet_mode == "derivative":
                parts.append(arrays["outlet"].x[batch["outlet"]])
                ids.append(rows(arrays["outlet"].index, batch["outlet"]))
            ids = None if ids[0] is None else np.concatenate(ids)
            O = self._net(ctx, leaves, np.concatenate(parts), ids, 2)
            if "phy" in self.terms:
                e = nse_residual_jet(O[:, :nc], sc.c_conv, sc.c_visc)
                out["phy"] = T.masked_mse(e)
            if "outlet" in self.terms and self.outlet_mode == "derivative":
                out["outlet"] = T.masked_mse(O[2, nc:, :3])  # slot 2 = d/dx2 (outlet normal)
        return {t: out[t] for t in self.terms}

    def losses(self, leaves, batch):
        return self._losses(leaves, self.train, self.coll, batch)

    def val_metric(self):
        """Unweighted sum of the active loss terms on the validation split."""
        if self.val is None:
            return float("nan")
        batch = {t: np.arange(len(self.val_coll[0]) if t == "phy" else len(self.val[t])) for t in self.terms}
        if any(len(b) == 0 for b in batch.values()):
            batch = {t: b for t, b in batch.items() if len(b)}
            saved, self.terms = self.terms, [t for t in self.terms if t in batch]
            try:
                vals = self._losses(None, self.val, self.val_coll, batch)
            finally:
                self.terms = saved
        else:
            vals = self._losses(None, self.val, self.val_coll, batch)
        return float(sum(float(v) for v in vals.values()))


# ---------------------------------------------------------------------------
# operator networks (DeepONet / PI-DeepONet)
# ---------------------------------------------------------------------------


class OperatorProblem(PinnProblem):
    """Triplet arrays and loss graph for (PI-)DeepONet training.

    ``train``/``val`` map stratum names to operator triplets. The branch
    product is evaluated once per step for every function instance and then
    gathered per row, so a batch may mix instances freely.
    """

    def __init__(self, model, train, val=None, kind="pi-deeponet", batch_size=256,
                 outlet_mode="auto", val_phy_points=2048):
        if kind not in ("deeponet", "pi-deeponet"):
            raise ConfigurationError(f"operator problems take deeponet kinds, not {kind!r}")
        super().__init__(model, _TripletCloud(train), None if val is None else _TripletCloud(val),
                         kind, batch_size, outlet_mode, val_phy_points)

    def _arrays(self, cloud, sc):
        out = {k: _Arrays(t.coordinates, t.targets, t.mask, sc, t.index) for k, t in cloud.items()}
        any_t = next(iter(cloud.values()))
        out["_sensors"] = (any_t.instance_sensors1 / sc.velocity, any_t.instance_sensors2 / sc.pressure)
        return out

    def _context(self, leaves, arrays):
        s1, s2 = arrays["_sensors"]
        return self.model.branch_product(s1, s2, leaves)

    def _net(self, ctx, leaves, x, index, order):
        return self.model.merge(ctx, index, x, order=order, leaves=leaves)


class _TripletCloud(dict):
    """Adapter giving a dict of triplets the stratum interface problems expect."""

    @property
    def strata(self):
        return list(self.keys())

    def __getitem__(self, k):
        return _TripletStratum(dict.__getitem__(self, k))


class _TripletStratum:
    def __init__(self, t):
        self.t = t
        self.x, self.values, self.mask, self.index = t.coordinates, t.targets, t.mask, t.index
        self.instance_sensors1, self.instance_sensors2 = t.instance_sensors1, t.instance_sensors2
        self.coordinates, self.targets = t.coordinates, t.targets

    def __len__(self):
        return len(self.t)

    @property
    def has_velocity(self):
        return bool(len(self.t)) and bool(self.mask[:, :3].all())
