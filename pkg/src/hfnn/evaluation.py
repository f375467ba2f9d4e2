"""Error metrics, reports, study drivers and field export."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import ConfigurationError, ValidationError
from .physics import FlowField

log = logging.getLogger(__name__)

REPORT_HEADER = ["model", "V", "split", "vel_l2_rel", "pres_l2_rel", "train_s", "infer_s", "stop_iter"]
METRIC_BATCH = 10_000


def l2_relative_error(predicted, truth, batch_size=METRIC_BATCH) -> float:
    """Mean over consecutive batches of ``||pred - truth|| / ||truth||``."""
    a = np.asarray(predicted, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    if len(a) == 0:
        raise ConfigurationError("no points to evaluate")
    errs, skipped = [], 0
    for s in range(0, len(a), batch_size):
        den = _accel.norm(b[s : s + batch_size])
        if den == 0.0:
            skipped += 1
            continue
        errs.append(_accel.norm(a[s : s + batch_size] - b[s : s + batch_size]) / den)
    if skipped:
        warnings.warn(f"{skipped} batch(es) with zero-norm truth excluded from the error", stacklevel=2)
    if not errs:
        return math.nan
    return float(np.mean(errs))


def velocity_magnitude(field_or_v) -> np.ndarray:
    v = field_or_v.v if isinstance(field_or_v, FlowField) else np.atleast_2d(field_or_v)
    return np.sqrt(np.sum(v * v, axis=1))


def pressure_shift_correct(predicted_p, truth_p):
    """Remove the mean offset; returns ``(corrected, shift)``."""
    a = np.asarray(predicted_p, dtype=np.float64)
    b = np.asarray(truth_p, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError("pressure arrays differ in length")
    shift = float(np.mean(a - b))
    return a - shift, shift


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalEntry:
    model: str
    V: float
    split: str
    vel_l2_rel: float
    pres_l2_rel: float
    train_s: float = math.nan
    infer_s: float = math.nan
    stop_iter: int | None = None
    shift: float = 0.0  # recorded, not written to the report CSV

    def key(self):
        return (self.model, float(self.V), self.split)


@dataclass
class EvalReport:
    entries: list = field(default_factory=list)

    def add(self, entry: EvalEntry):
        if entry.vel_l2_rel < 0 or entry.pres_l2_rel < 0:
            raise ValidationError("errors must be non-negative")
        if any(e.key() == entry.key() for e in self.entries):
            raise ValidationError(f"duplicate report entry {entry.key()}")
        self.entries.append(entry)
        return entry

    def extend(self, other: EvalReport):
        for e in other.entries:
            self.add(e)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def find(self, model=None, V=None, split=None):
        return [
            e for e in self.entries
            if (model is None or e.model == model)
            and (V is None or math.isclose(e.V, V))
            and (split is None or e.split == split)
        ]

    def write_csv(self, path, include_timing=True):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for e in self.entries:
                w.writerow([
                    e.model, repr(float(e.V)), e.split, repr(float(e.vel_l2_rel)), repr(float(e.pres_l2_rel)),
                    repr(float(e.train_s)) if include_timing else "",
                    repr(float(e.infer_s)) if include_timing else "",
                    "" if e.stop_iter is None else str(int(e.stop_iter)),
                ])

    @classmethod
    def read_csv(cls, path):
        rep = cls()
        with open(path, newline="", encoding="utf-8") as f:
            r = csv.DictReader(f)
            for row in r:
                rep.add(EvalEntry(
                    row["model"], float(row["V"]), row["split"], float(row["vel_l2_rel"]), float(row["pres_l2_rel"]),
                    float(row["train_s"] or "nan"), float(row["infer_s"] or "nan"),
                    int(row["stop_iter"]) if row["stop_iter"] else None,
                ))
        return rep


def evaluate(predict, points, truth, model_id="model", V=math.nan, split="test", shift_correct=False,
             train_s=math.nan, stop_iter=None) -> EvalEntry:
    """Score ``predict(points) -> (v, p)`` against ``truth(points) -> (v, p)``.

    The pressure shift correction is applied only when ``shift_correct`` is
    set (data-free training, where pressure is determined up to a constant).
    """
    t0 = time.perf_counter()
    v, p = predict(points)
    infer = time.perf_counter() - t0
    vt, pt = truth(points)
    shift = 0.0
    if shift_correct:
        p, shift = pressure_shift_correct(p, pt)
    return EvalEntry(
        model_id, float(V), split,
        l2_relative_error(velocity_magnitude(v), velocity_magnitude(vt)),
        l2_relative_error(p, pt),
        train_s, infer, stop_iter, shift,
    )


def inference_timing(predict, n_points, domain, seed=0):
    """Time evaluation of all four fields at ``n_points`` interior points.

    Returns ``(seconds, points_per_second)``.
    """
    from .geometry import _volume

    pts = _volume(np.random.default_rng(seed), int(n_points), domain)
    t0 = time.perf_counter()
    v, p = predict(pts)
    dt = time.perf_counter() - t0
    if v.shape != (len(pts), 3) or p.shape != (len(pts),):
        raise ValidationError("prediction shapes do not match the query points")
    return dt, len(pts) / dt if dt > 0 else math.inf


# ---------------------------------------------------------------------------
# study drivers
# ---------------------------------------------------------------------------

TOGGLES = ("fourier", "rwf", "modified_mlp", "grad_norm", "lr_decay")


@dataclass(frozen=True)
class ToggleRow:
    name: str
    fourier: bool = True
    rwf: bool = True
    modified_mlp: bool = True
    grad_norm: bool = True
    lr_decay: bool = True
    nondimensional: bool = True

    @classmethod
    def all_on(cls):
        return cls("all-on")

    @classmethod
    def all_off(cls):
        return cls("all-off", **{t: False for t in TOGGLES})


def progressive_rows():
    """All on, then each technique switched off in turn and kept off."""
    rows = [ToggleRow.all_on()]
    state = {t: True for t in TOGGLES}
    for t in TOGGLES:
        state[t] = False
        rows.append(ToggleRow("no-" + "-".join(k for k in TOGGLES if not state[k]).replace("_", ""), **state))
    return rows


def ablation_run(run_fn, rows, seeds=(0,)):
    """Train and score one model per (row, seed); rows keep their order.

    ``run_fn(row, seed) -> EvalEntry`` does the work; the entry's model id is
    replaced by ``<row.name>/s<seed>``.
    """
    rep = EvalReport()
    for row in rows:
        for seed in seeds:
            e = run_fn(row, seed)
            e.model = f"{row.name}/s{seed}"
            rep.add(e)
    return rep


@dataclass(frozen=True)
class SplitScenario:
    name: str
    train_V: tuple
    test_V: tuple = ()

    def check(self, all_V):
        allv = sorted(float(v) for v in all_V)
        tr = [float(v) for v in self.train_V]
        if not tr:
            raise ValidationError(f"scenario {self.name}: empty training set")
        problems = []
        if not any(math.isclose(v, allv[0]) for v in tr) or not any(math.isclose(v, allv[-1]) for v in tr):
            problems.append("training set must include the minimum and maximum V")
        if set(tr) & {float(v) for v in self.test_V}:
            problems.append("train and test V overlap")
        for v in list(tr) + [float(v) for v in self.test_V]:
            if not any(math.isclose(v, a) for a in allv):
                problems.append(f"V={v} has no dataset")
        if problems:
            raise ValidationError(f"scenario {self.name}: " + "; ".join(problems), problems)


def split_study(run_fn, all_V, scenarios):
    """Per scenario: ``run_fn(scenario) -> EvalReport`` with train and test rows."""
    out = {}
    for sc in scenarios:
        sc.check(all_V)
    for sc in scenarios:
        rep = run_fn(sc)
        for e in rep:
            if e.split == "test" and not any(math.isclose(e.V, v) for v in sc.test_V):
                raise ValidationError(f"scenario {sc.name}: unexpected test V={e.V}")
        out[sc.name] = rep
    return out


# ---------------------------------------------------------------------------
# field export
# ---------------------------------------------------------------------------


def export_field(predict, points, path, fmt="csv", truth=None):
    """Write predicted ``(v1, v2, v3, p)`` (plus absolute errors if ``truth``)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    v, p = predict(pts)
    err = None
    if truth is not None:
        vt, pt = truth(pts)
        err = np.concatenate([np.abs(v - vt), np.abs(p - pt)[:, None]], axis=1)
    if fmt == "csv":
        _field_csv(path, pts, v, p, err)
    elif fmt == "vtk-legacy":
        _field_vtk(path, pts, v, p, err)
    else:
        raise ConfigurationError(f"unknown field format {fmt!r}")
    return path


def _field_csv(path, pts, v, p, err):
    from .geometry import CSV_HEADER

    header = list(CSV_HEADER)
    if err is not None:
        header += ["err_v1", "err_v2", "err_v3", "err_p"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for i in range(len(pts)):
            row = [repr(float(c)) for c in pts[i]] + [repr(float(c)) for c in v[i]] + [repr(float(p[i])), "data"]
            if err is not None:
                row += [repr(float(c)) for c in err[i]]
            w.writerow(row)


def _field_vtk(path, pts, v, p, err):
    n = len(pts)
    with open(path, "w", encoding="ascii") as f:
        f.write("# vtk DataFile Version 3.0\nhfnn predicted field\nASCII\nDATASET POLYDATA\n")
        f.write(f"POINTS {n} double\n")
        np.savetxt(f, pts, fmt="%.17g")
        f.write(f"VERTICES {n} {2 * n}\n")
        np.savetxt(f, np.stack([np.ones(n, dtype=np.int64), np.arange(n)], axis=1), fmt="%d")
        f.write(f"POINT_DATA {n}\nVECTORS velocity double\n")
        np.savetxt(f, v, fmt="%.17g")
        f.write("SCALARS pressure double 1\nLOOKUP_TABLE default\n")
        np.savetxt(f, p, fmt="%.17g")
        if err is not None:
            f.write("VECTORS velocity_abs_error double\n")
            np.savetxt(f, err[:, :3], fmt="%.17g")
            f.write("SCALARS pressure_abs_error double 1\nLOOKUP_TABLE default\n")
            np.savetxt(f, err[:, 3], fmt="%.17g")


def summarize(values):
    """Mean and sample standard deviation (0 for a single value)."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0

