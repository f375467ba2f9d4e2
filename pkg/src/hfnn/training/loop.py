"""Training loop, warm-up schedule and transfer learning."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .. import _accel, nn
from ..errors import ConfigurationError, DivergenceError
from ..autodiff import tensor as T
from .optim import AdamConfig, AdamState, GradNormConfig, adam_step, grad_norm_update, learning_rate
from .problems import TERMS

log = logging.getLogger(__name__)

MODEL_KINDS = ("deepnn", "pinn", "wu-pinn", "deeponet", "pi-deeponet")
METRICS_HEADER = [
    "iter", "loss_total",
    *(f"loss_{t}" for t in TERMS),
    *(f"lambda_{t}" for t in TERMS),
    "lr", "val_metric", "wall_clock_s",
]


@dataclass
class TrainConfig:
    model_kind: str = "pinn"
    iterations: int = 20000
    batch_size: int = 256
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)
    grad_norm: GradNormConfig = field(default_factory=GradNormConfig)
    warmup_iterations: int = 0
    target_total_loss: float = math.inf
    stop_window: int = 1
    log_every: int = 100
    val_every: int = 500
    checkpoint_every: int = 1000
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigurationError(f"model_kind must be one of {MODEL_KINDS}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigurationError("iterations must be >= 0 and batch_size >= 1")
        if self.model_kind == "wu-pinn" and not 0 <= self.warmup_iterations < max(self.iterations, 1):
            raise ConfigurationError("warmup_iterations must be < iterations")
        if self.stop_window < 1:
            raise ConfigurationError("stop_window must be >= 1")


@dataclass
class RunResult:
    theta: np.ndarray  # best parameters by validation metric
    final_theta: np.ndarray
    metrics: list
    lambdas: np.ndarray
    terms: list
    stop_iter: int
    iterations_run: int
    train_seconds: float
    best_val: float
    min_total: float
    final_window_loss: float
    adam: AdamState | None = None
    phases: list = field(default_factory=list)
    history: np.ndarray | None = None  # unweighted loss sum per iteration
    reached_target: bool = False

    def write_metrics(self, path):
        write_metrics(path, self.metrics)


def write_metrics(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in METRICS_HEADER])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _flat(grads):
    return np.concatenate([g.reshape(-1) for g in grads])


def train(config: TrainConfig, problem, lambdas=None, clock=time.perf_counter):
    """Run the optimisation loop on ``problem`` (parameters are updated in place).

    A finite ``target_total_loss`` stops the run once the trailing mean of the
    unweighted loss sum over ``stop_window`` iterations reaches it.

    Returns a :class:`RunResult`; on return ``problem.theta`` holds the best
    parameters found by the validation metric.

    BLAS runs single-threaded inside the loop: OpenBLAS picks different gemm
    kernels for different thread counts, which would change the last bits of
    the losses and break run-to-run reproducibility.
    """
    with threadpool_limits(limits=1, user_api="blas"):
        return _train(config, problem, lambdas, clock)


def _train(config, problem, lambdas, clock):
    terms = list(problem.terms)
    n = len(terms)
    if lambdas is None:
        lam = np.ones(n)
    else:
        full = dict(zip(TERMS, np.asarray(lambdas, dtype=np.float64)))
        lam = np.array([full.get(t, 1.0) for t in terms])
    theta = problem.theta
    leaves = problem.leaves()
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros(theta.size)
    gn = config.grad_norm
    t0 = clock()
    rows, window, history = [], [], []
    best_val, best_theta = math.inf, theta.copy()
    snapshot = (theta.copy(), state.copy(), lam.copy(), 0)
    guard_used = False
    ref_total = None
    norms = {}
    min_total = math.inf
    stop_iter = config.iterations
    it = 0
    while it < config.iterations:
        batch = problem.sample(rng)
        loss_nodes = problem.losses(leaves, batch)
        values = np.array([float(loss_nodes[t].value) for t in terms])
        if gn.enabled and it % gn.update_every == 0:
            per = [_flat(T.backprop(loss_nodes[t], leaves)) for t in terms]
            gnorms = np.array([_accel.norm(g) for g in per])
            norms = dict(zip(terms, gnorms))
            lam = grad_norm_update(lam, gnorms, gn.momentum)
            grad = sum(l * g for l, g in zip(lam, per))
        else:
            total_node = None
            for l, t in zip(lam, terms):
                term = T.mul(loss_nodes[t], float(l))
                total_node = term if total_node is None else T.add(total_node, term)
            grad = _flat(T.backprop(total_node, leaves))
        total = float(np.sum(lam * values))
        if ref_total is None:
            ref_total = max(1.0, abs(total)) if math.isfinite(total) else 1.0
        bad = not math.isfinite(total) or total > config.divergence_factor * ref_total
        bad = bad or not np.all(np.isfinite(grad))
        lr_now = learning_rate(config.adam, state.t, state.lr_scale)
        if bad:
            if guard_used:
                theta[:] = snapshot[0]
                raise DivergenceError(
                    f"training diverged at iteration {it} (total loss {total!r})", iteration=it, term_norms=norms
                )
            guard_used = True
            log.warning("divergence at iteration %d; halving learning rate and restoring iteration %d", it, snapshot[3])
            theta[:] = snapshot[0]
            state = snapshot[1].copy()
            state.lr_scale *= 0.5
            lam = snapshot[2].copy()
            it = snapshot[3]
            del window[:]
            continue
        min_total = min(min_total, total)
        raw = float(values.sum())
        del history[it:]
        history.append(raw)
        window.append(raw)
        if len(window) > config.stop_window:
            window.pop(0)
        target = config.target_total_loss
        if math.isfinite(target) and len(window) == config.stop_window and float(np.mean(window)) <= target:
            stop_iter = it
            rows.append(_row(it, total, terms, values, lam, lr_now, problem.val_metric(), clock() - t0))
            break
        val = None
        if config.val_every and it % config.val_every == 0:
            val = problem.val_metric()
            if val < best_val:
                best_val, best_theta = val, theta.copy()
        if config.log_every and it % config.log_every == 0:
            rows.append(_row(it, total, terms, values, lam, lr_now, val, clock() - t0))
        if config.checkpoint_every and it % config.checkpoint_every == 0:
            snapshot = (theta.copy(), state.copy(), lam.copy(), it)
        adam_step(config.adam, state, theta, grad, norms)
        it += 1
    final_theta = theta.copy()
    if stop_iter == config.iterations:
        val = problem.val_metric()
        if val < best_val or not math.isfinite(best_val):
            best_val, best_theta = val, theta.copy()
        if not rows or rows[-1]["iter"] != it:
            rows.append(_row(it, None, terms, None, lam, learning_rate(config.adam, state.t, state.lr_scale), val, clock() - t0))
    else:
        best_theta = theta.copy()
    theta[:] = best_theta
    return RunResult(
        theta=best_theta,
        final_theta=final_theta,
        metrics=rows,
        lambdas=_full_lambdas(terms, lam),
        terms=terms,
        stop_iter=stop_iter,
        iterations_run=it,
        train_seconds=clock() - t0,
        best_val=best_val,
        min_total=min_total,
        final_window_loss=float(np.mean(window)) if window else math.nan,
        adam=state,
        history=np.array(history),
        reached_target=stop_iter < config.iterations,
    )


def _full_lambdas(terms, lam):
    d = dict(zip(terms, lam))
    return np.array([d.get(t, 1.0) for t in TERMS])


def _row(it, total, terms, values, lam, lr, val, wall):
    row = {"iter": it, "loss_total": total, "lr": lr, "val_metric": val, "wall_clock_s": wall}
    for i, t in enumerate(terms):
        row[f"loss_{t}"] = None if values is None else values[i]
        row[f"lambda_{t}"] = lam[i]
    return row


def warmup_train(config: TrainConfig, make_problem):
    """DeepNN warm-up followed by PINN training on the best warm-up weights.

    ``make_problem(kind)`` builds a problem sharing one parameter vector for
    ``kind`` in {"deepnn", "pinn"}.
    """
    if config.model_kind != "wu-pinn":
        raise ConfigurationError("warmup_train() needs model_kind='wu-pinn'")
    phases = []
    w = config.warmup_iterations
    if w > 0:
        p1 = make_problem("deepnn")
        r1 = train(replace(config, model_kind="deepnn", iterations=w), p1)
        phases.append(r1)
    p2 = make_problem("pinn")
    if w > 0 and not np.shares_memory(p2.theta, p1.theta):
        p2.theta[:] = r1.theta
    r2 = train(replace(config, model_kind="pinn", iterations=config.iterations - w), p2)
    phases.append(r2)
    # phases keep their own timings; the combined result reports the sum
    return replace(r2, phases=phases, train_seconds=sum(p.train_seconds for p in phases))


def check_compatible(baseline: nn.NetworkSpec, target: nn.NetworkSpec):
    a = replace(baseline, seed=0)
    b = replace(target, seed=0)
    if a != b:
        diff = [k for k in a.__dataclass_fields__ if getattr(a, k) != getattr(b, k)]
        raise ConfigurationError(f"baseline and target architectures differ in {diff}")


def first_reach(history, target, window):
    """First iteration whose trailing ``window`` mean is <= ``target`` (or None)."""
    h = np.asarray(history, dtype=np.float64)
    if len(h) < window:
        return None
    means = np.lib.stride_tricks.sliding_window_view(h, window).mean(axis=1)
    hit = np.nonzero(means <= target)[0]
    return int(hit[0] + window - 1) if len(hit) else None


def transfer_train(baseline: nn.ParamStore, config: TrainConfig, problem, stop_at_loss, lambdas=None):
    """Warm-start ``problem``'s network from ``baseline`` and train until the loss target."""
    store = problem.model.store
    check_compatible(baseline.spec, store.spec)
    store.theta[:] = baseline.theta
    if baseline.B is not None:
        store.B = baseline.B.copy()
    cfg = replace(config, target_total_loss=stop_at_loss)
    return train(cfg, problem, lambdas=lambdas)
