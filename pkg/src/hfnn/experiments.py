"""Builders and runners shared by the command line and the acceptance suite.

Everything here is a thin composition of the library modules driven by an
:class:`~hfnn.config.ExperimentConfig`; a single ``seed`` feeds point
sampling, splitting, network initialisation and batch sampling.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint, evaluation as E, geometry as G, nn, operators as O
from .config import ExperimentConfig
from .errors import ConfigurationError
from .physics import FluidParams
from .training import loop
from .training.optim import AdamConfig, GradNormConfig
from .training.problems import OperatorProblem, PinnModel, PinnProblem, Scaling

log = logging.getLogger(__name__)

OPERATOR_KINDS = ("deeponet", "pi-deeponet")


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------


def domain_spec(cfg: ExperimentConfig) -> G.DomainSpec:
    d = cfg.domain
    return G.DomainSpec(d.kind, d.R, d.length, d.center_fraction, d.max_radius_ratio, d.shape_width)


def fluid(cfg: ExperimentConfig, V=None) -> FluidParams:
    f, d = cfg.fluid, cfg.domain
    return FluidParams(rho=f.rho, mu=f.mu, V=f.V if V is None else float(V), R=d.R, L=d.length)


def network_spec(cfg: ExperimentConfig, seed, input_dim=3, output_dim=4) -> nn.NetworkSpec:
    n = cfg.network
    return nn.NetworkSpec(
        input_dim, output_dim, n.hidden_layers, n.hidden_width, kind=n.kind, embedding=n.embedding,
        fourier_e=n.fourier_e, fourier_sigma=n.fourier_sigma, factorization=n.factorization,
        rwf_mu=n.rwf_mu, rwf_sigma=n.rwf_sigma, seed=int(seed),
    )


def train_config(cfg: ExperimentConfig, kind=None, seed=0, **over) -> loop.TrainConfig:
    t = cfg.train
    tc = loop.TrainConfig(
        model_kind=kind or cfg.run.model_kind,
        iterations=t.iterations,
        batch_size=t.batch_size,
        seed=int(seed),
        adam=AdamConfig(lr=t.lr, decay_rate=t.decay_rate, decay_steps=t.decay_steps, decay=t.decay),
        grad_norm=GradNormConfig(enabled=t.grad_norm, momentum=t.gn_momentum, update_every=t.gn_every),
        warmup_iterations=t.warmup_iterations if (kind or cfg.run.model_kind) == "wu-pinn" else 0,
        log_every=t.log_every,
        val_every=t.val_every,
        checkpoint_every=t.checkpoint_every,
    )
    return replace(tc, **over) if over else tc


def apply_toggles(cfg: ExperimentConfig, row: E.ToggleRow) -> ExperimentConfig:
    return cfg.replace(
        network__embedding="fourier" if row.fourier else "none",
        network__factorization="rwf" if row.rwf else "none",
        network__kind="modified-mlp" if row.modified_mlp else "mlp",
        train__grad_norm=row.grad_norm,
        train__decay=row.lr_decay,
        network__nondimensional=row.nondimensional,
    )


def counts(cfg):
    s = cfg.sampling
    return {"inlet": s.inlet, "wall": s.wall, "outlet": s.outlet, "volume": s.volume}


def make_cloud(cfg: ExperimentConfig, V=None, seed=0, scenario=True) -> G.StratifiedPointCloud:
    """Sampled cloud with boundary labels, plus the configured data scenario and noise."""
    dom = domain_spec(cfg)
    fl = fluid(cfg, V)
    cloud = G.sample_domain(dom, counts(cfg), seed=seed, fluid=fl, p_out=cfg.fluid.p_out)
    sc = cfg.scenario
    if scenario and sc.kind != "none":
        cloud = G.with_data_scenario(cloud, G.DataScenario(sc.kind, sc.n_slices, sc.fraction, sc.tolerance), seed)
        if cfg.noise.level > 0:
            cloud = G.inject_noise(cloud, cfg.noise.level, fl.V, seed)
    return cloud


# ---------------------------------------------------------------------------
# point-wise networks
# ---------------------------------------------------------------------------


@dataclass
class PinnRun:
    kind: str
    seed: int
    model: PinnModel
    result: loop.RunResult
    entry: E.EvalEntry
    cloud: G.StratifiedPointCloud
    test: G.StratifiedPointCloud


def pinn_problem(cfg, model, train, val, kind):
    return PinnProblem(model, train, val, kind=kind, batch_size=cfg.train.batch_size, outlet_mode=cfg.train.outlet_mode)


def run_pinn(cfg: ExperimentConfig, seed=0, kind=None, V=None, cloud=None, lambdas=None) -> PinnRun:
    """Train one DeepNN / PINN / WU-PINN and score it on the test split."""
    kind = kind or cfg.run.model_kind
    if kind in OPERATOR_KINDS:
        raise ConfigurationError(f"{kind} is an operator model; use run_operator")
    cloud = cloud if cloud is not None else make_cloud(cfg, V, seed)
    tr, va, te = G.split(cloud, cfg.sampling.split, seed)
    fl = fluid(cfg, cloud.V)
    scaling = Scaling.for_fluid(fl, cfg.network.nondimensional)
    model = PinnModel(nn.init(network_spec(cfg, seed)), scaling)
    tc = train_config(cfg, kind, seed)
    if kind == "wu-pinn":
        res = loop.warmup_train(tc, lambda k: pinn_problem(cfg, model, tr, va, k))
    else:
        res = loop.train(tc, pinn_problem(cfg, model, tr, va, kind), lambdas=lambdas)
    entry = score_pinn(model, te, cloud, kind, res)
    return PinnRun(kind, seed, model, res, entry, cloud, te)


def score_pinn(model, test, cloud, kind, res=None, split="test"):
    if cloud.truth is None:
        raise ConfigurationError("no truth source for evaluation")
    data_free = not len(cloud["data"])
    return E.evaluate(
        model.predict, test["volume"].x, cloud.truth, model_id=kind, V=cloud.V, split=split,
        shift_correct=data_free and kind != "deepnn",
        train_s=res.train_seconds if res else math.nan, stop_iter=res.stop_iter if res else None,
    )


# ---------------------------------------------------------------------------
# operator networks
# ---------------------------------------------------------------------------


def operator_spec(cfg: ExperimentConfig, seed=0) -> O.OperatorSpec:
    o, n = cfg.operator, cfg.network
    q = 4 * o.per_output

    def branch(m, s):
        return nn.NetworkSpec(m, q, o.branch_layers, o.branch_width, kind=o.branch_kind,
                              factorization=o.branch_factorization, rwf_mu=n.rwf_mu, rwf_sigma=n.rwf_sigma, seed=s)

    trunk = network_spec(cfg, 3 * int(seed) + 2, output_dim=q)
    return O.OperatorSpec(branch(o.m1, 3 * int(seed)), branch(o.m2, 3 * int(seed) + 1), trunk, O.even_partition(q))


def operator_clouds(cfg: ExperimentConfig, Vs, seed=0):
    """One labelled cloud per V on shared coordinates; ``data`` = first interior points."""
    out = []
    for V in Vs:
        c = make_cloud(cfg, V, seed, scenario=False)
        vol = c["volume"]
        k = min(cfg.operator.data_points, len(vol))
        if k > 0:
            c = c.with_stratum("data", G.label_full(vol.x[:k], c.truth))
        out.append(c)
    return out


@dataclass
class OperatorRun:
    kind: str
    seed: int
    model: O.OperatorModel
    result: loop.RunResult
    report: E.EvalReport
    train_V: tuple
    test_V: tuple
    tests: dict = field(default_factory=dict)


def run_operator(cfg: ExperimentConfig, seed=0, kind=None, train_V=None, test_V=None) -> OperatorRun:
    kind = kind or cfg.run.model_kind
    if kind not in OPERATOR_KINDS:
        raise ConfigurationError(f"{kind} is not an operator model kind")
    train_V = tuple(cfg.operator.train_V if train_V is None else train_V)
    test_V = tuple(cfg.operator.test_V if test_V is None else test_V)
    dom = domain_spec(cfg)
    clouds = operator_clouds(cfg, train_V, seed)
    parts = [G.split(c, cfg.sampling.split, seed) for c in clouds]
    sensors = O.SensorLayout.for_domain(dom, cfg.operator.m1, cfg.operator.m2)
    trip_tr = O.build_triplets([p[0] for p in parts], sensors)
    trip_va = O.build_triplets([p[1] for p in parts], sensors)
    ref = fluid(cfg, cfg.operator.V_ref)
    scaling = Scaling.for_fluid(ref, cfg.network.nondimensional, V_ref=cfg.operator.V_ref)
    model = O.OperatorModel(operator_spec(cfg, seed), scaling=scaling, sensors=sensors, R=dom.R, p_out=cfg.fluid.p_out)
    problem = OperatorProblem(model, trip_tr, trip_va, kind=kind, batch_size=cfg.train.batch_size,
                              outlet_mode=cfg.train.outlet_mode)
    res = loop.train(train_config(cfg, kind, seed), problem)
    rep = E.EvalReport()
    tests = {}
    for V, (_, _, te), c in zip(train_V, parts, clouds):
        tests[V] = te["volume"].x
        rep.add(_score_op(model, te["volume"].x, c.truth, kind, V, "train", res))
    for V in test_V:
        c = make_cloud(cfg, V, seed, scenario=False)
        te = G.split(c, cfg.sampling.split, seed)[2]
        tests[V] = te["volume"].x
        rep.add(_score_op(model, te["volume"].x, c.truth, kind, V, "test", res))
    return OperatorRun(kind, seed, model, res, rep, train_V, test_V, tests)


def _score_op(model, x, truth, kind, V, split, res):
    return E.evaluate(lambda p: model.predict(p, V=V), x, truth, model_id=kind, V=V, split=split,
                      train_s=res.train_seconds, stop_iter=res.stop_iter)


def operator_residual_mse(model: O.OperatorModel, cfg: ExperimentConfig, V, n=10_000, seed=12345):
    """Mean squared NSE residual at ``n`` fresh interior points."""
    pts = G._volume(np.random.default_rng(seed), n, domain_spec(cfg))
    r = O.operator_residual(model, pts, V)
    return float(np.mean(r * r))


# ---------------------------------------------------------------------------
# transfer learning
# ---------------------------------------------------------------------------


@dataclass
class TransferRun:
    seed: int
    baseline: PinnRun
    cold: PinnRun
    warm: PinnRun
    target_loss: float
    cold_reach: int | None

    @property
    def warm_reached(self):
        return self.warm.result.reached_target

    @property
    def speedup(self):
        if self.cold_reach is None or not self.warm_reached:
            return math.nan
        return (self.cold_reach + 1) / (self.warm.result.stop_iter + 1)


def run_transfer(cfg: ExperimentConfig, seed=0, target_V=None, baseline: PinnRun | None = None, cold: PinnRun | None = None):
    """Baseline at ``transfer.baseline_V``, then cold and warm runs at ``target_V``.

    The loss target is the cold run's trailing-window mean at its last
    iteration; ``cold_reach`` is the first iteration where the cold run's own
    trailing mean reached that value, and the warm run stops as soon as its
    trailing mean does.
    """
    t = cfg.transfer
    target_V = t.target_V[0] if target_V is None else float(target_V)
    kind = cfg.run.model_kind if cfg.run.model_kind in ("pinn", "deepnn") else "pinn"
    baseline = baseline or run_pinn(cfg, seed, kind, V=t.baseline_V)
    cold = cold or run_pinn(cfg, seed, kind, V=target_V)
    hist = cold.result.history
    w = min(t.window, len(hist))
    target = float(np.mean(hist[-w:]))
    reach = loop.first_reach(hist, target, w)
    cloud = make_cloud(cfg, target_V, seed)
    tr, va, te = G.split(cloud, cfg.sampling.split, seed)
    scaling = Scaling.for_fluid(fluid(cfg, target_V), cfg.network.nondimensional)
    model = PinnModel(nn.init(network_spec(cfg, seed)), scaling)
    tc = train_config(cfg, kind, seed, stop_window=w)
    res = loop.transfer_train(baseline.model.store, tc, pinn_problem(cfg, model, tr, va, kind), target,
                              lambdas=baseline.result.lambdas)
    entry = score_pinn(model, te, cloud, "transfer", res)
    warm = PinnRun("transfer", seed, model, res, entry, cloud, te)
    return TransferRun(seed, baseline, cold, warm, target, reach)


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------


def run_dir(cfg: ExperimentConfig, run_id=None, output=None):
    rid = run_id or cfg.run.run_id or time.strftime("run-%Y%m%d-%H%M%S")
    path = os.path.join(output or cfg.run.output_dir, rid)
    os.makedirs(os.path.join(path, "fields"), exist_ok=True)
    cfg.write(os.path.join(path, "config.echo"))
    return path


def save_pinn(path, run: PinnRun):
    checkpoint.save(path, run.model.store, lambdas=run.result.lambdas, scaling=run.model.scaling.to_text())


def load_pinn(path) -> PinnModel:
    store, extras = checkpoint.load(path, with_extras=True)
    if "scaling" not in extras:
        raise ConfigurationError(f"{path}: checkpoint has no scaling section")
    return PinnModel(store, Scaling.from_text(extras["scaling"]))


def load_model(path):
    """PINN-style or operator checkpoint, told apart by the magic bytes."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == O.OP_MAGIC:
        return O.load_operator(path)
    return load_pinn(path)
