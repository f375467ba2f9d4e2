"""Domains, stratified point clouds, data scenarios, splits, noise and CSV I/O.

All clouds are stored in SI units. The flow axis is ``x2``; the inlet disc is
centred at the origin and the outlet sits at ``x2 = length``.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DegenerateScenarioError, ValidationError
from .physics import FluidParams, PoiseuilleOracle, parabolic_inlet

log = logging.getLogger(__name__)

STRATA = ("inlet", "wall", "outlet", "volume", "data")
BOUNDARY = ("inlet", "wall", "outlet")
CSV_HEADER = ["x1", "x2", "x3", "v1", "v2", "v3", "p", "stratum"]
_GEOM_TOL = 1e-9


@dataclass(frozen=True)
class DomainSpec:
    kind: str = "straight-pipe"
    R: float = 0.010065
    length: float = 0.26009
    center_fraction: float = 0.5
    max_radius_ratio: float = 2.0
    shape_width: float | None = None  # None -> length / 10

    def __post_init__(self):
        if self.kind not in ("straight-pipe", "aaa-idealized"):
            raise ConfigurationError(f"unknown domain kind {self.kind!r}")
        if not (self.R > 0 and self.length > 0):
            raise ConfigurationError("R and length must be positive")
        if self.kind == "aaa-idealized":
            if not 0.0 < self.center_fraction < 1.0:
                raise ConfigurationError("center_fraction must lie in (0, 1)")
            if self.max_radius_ratio < 1.0:
                raise ConfigurationError("max_radius_ratio must be >= 1")
            if self.width <= 0:
                raise ConfigurationError("shape_width must be positive")
            x = np.linspace(0.0, self.length, 2001)
            if np.any(radius_profile(self, x) < self.R * (1 - 1e-12)):
                raise ConfigurationError("bulge parameters give a radius below R inside the domain")

    @property
    def width(self) -> float:
        return self.length / 10.0 if self.shape_width is None else self.shape_width

    @property
    def max_radius(self) -> float:
        if self.kind == "straight-pipe":
            return self.R
        x = np.linspace(0.0, self.length, 4001)
        return float(max(radius_profile(self, x).max(), self.max_radius_ratio * self.R))


def _bulge_parts(spec, x2):
    c, w, L = spec.center_fraction * spec.length, spec.width, spec.length
    g = lambda x: np.exp(-((x - c) ** 2) / (2 * w * w))  # noqa: E731
    g0, gL = g(0.0), g(L)
    chord = g0 + (gL - g0) * x2 / L
    return g(x2), chord, 1.0 - (g0 + (gL - g0) * c / L), (gL - g0) / L, c, w


def radius_profile(spec: DomainSpec, x2):
    """Wall radius at axial position ``x2``.

    The aneurysm is a Gaussian bulge with its tails pulled to exactly zero at
    both ends by subtracting the chord through the end values; the peak is
    rescaled so ``rho(c) = ratio * R``.
    """
    x2 = np.asarray(x2, dtype=np.float64)
    if np.any(x2 < -_GEOM_TOL * spec.length) or np.any(x2 > spec.length * (1 + _GEOM_TOL)):
        raise ConfigurationError("x2 outside [0, length]")
    if spec.kind == "straight-pipe":
        return np.full(x2.shape, spec.R) if x2.ndim else spec.R
    G, chord, peak, _, _, _ = _bulge_parts(spec, x2)
    return spec.R + (spec.max_radius_ratio - 1.0) * spec.R * (G - chord) / peak


def radius_slope(spec: DomainSpec, x2):
    x2 = np.asarray(x2, dtype=np.float64)
    if spec.kind == "straight-pipe":
        return np.zeros(x2.shape)
    G, _, peak, dchord, c, w = _bulge_parts(spec, x2)
    dG = -G * (x2 - c) / (w * w)
    return (spec.max_radius_ratio - 1.0) * spec.R * (dG - dchord) / peak


@dataclass
class Stratum:
    """Points of one stratum with labels ``(v1, v2, v3, p)`` and a presence mask."""

    x: np.ndarray
    values: np.ndarray = None
    mask: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 3)
        n = len(self.x)
        if self.values is None:
            self.values = np.zeros((n, 4))
        if self.mask is None:
            self.mask = np.zeros((n, 4), dtype=bool)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(n, 4)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(n, 4)
        self.values = np.where(self.mask, self.values, 0.0)

    def __len__(self):
        return len(self.x)

    @property
    def v(self):
        return self.values[:, :3]

    @property
    def p(self):
        return self.values[:, 3]

    @property
    def has_velocity(self):
        return bool(len(self)) and bool(self.mask[:, :3].all())

    @property
    def has_pressure(self):
        return bool(len(self)) and bool(self.mask[:, 3].all())

    def take(self, idx) -> Stratum:
        return Stratum(self.x[idx], self.values[idx], self.mask[idx])

    def copy(self) -> Stratum:
        return self.take(slice(None))

    def equals(self, other: Stratum) -> bool:
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.mask, other.mask)
        )


def _empty():
    return Stratum(np.zeros((0, 3)))


@dataclass
class StratifiedPointCloud:
    strata: dict = field(default_factory=dict)
    V: float | None = None
    domain: DomainSpec | None = None
    truth: object = None  # callable x -> (v, p) in SI units, or None

    def __post_init__(self):
        for name in STRATA:
            self.strata.setdefault(name, _empty())
        unknown = set(self.strata) - set(STRATA)
        if unknown:
            raise ConfigurationError(f"unknown strata {sorted(unknown)}")

    def __getitem__(self, name) -> Stratum:
        return self.strata[name]

    def sizes(self):
        return {k: len(self.strata[k]) for k in STRATA}

    def with_stratum(self, name, stratum) -> StratifiedPointCloud:
        strata = dict(self.strata)
        strata[name] = stratum
        return replace(self, strata=strata)

    def all_coordinates(self, names=STRATA):
        return np.concatenate([self.strata[k].x for k in names], axis=0)

    def equals(self, other) -> bool:
        return all(self.strata[k].equals(other.strata[k]) for k in STRATA)

    def validate(self, domain: DomainSpec | None = None, inlet_tol=1e-12):
        """List of invariant violations (empty when the cloud is consistent)."""
        problems = []
        w = self.strata["wall"]
        if len(w):
            bad = np.nonzero(w.mask[:, :3].all(axis=1) & np.any(w.v != 0.0, axis=1))[0]
            problems += [f"wall point {i}: non-zero velocity (no-slip violated)" for i in bad]
            if not w.mask[:, :3].all():
                problems.append("wall stratum has missing velocity labels")
        for name in ("inlet", "wall", "outlet"):
            s = self.strata[name]
            if len(s) and s.mask[:, 3].any():
                problems.append(f"{name} stratum carries pressure labels")
        if len(self.strata["volume"]) and self.strata["volume"].mask.any():
            problems.append("volume stratum carries labels")
        d = self.strata["data"]
        if len(d) and not d.mask.all():
            problems.append("data stratum has missing labels")
        domain = domain or self.domain
        if domain is not None:
            problems += _geometry_problems(self, domain)
        return problems


def _geometry_problems(cloud, domain):
    out = []
    L = domain.length
    tol = _GEOM_TOL
    r = lambda s: np.hypot(s.x[:, 0], s.x[:, 2])  # noqa: E731
    s = cloud["inlet"]
    if len(s):
        bad = (np.abs(s.x[:, 1]) > tol) | (r(s) > domain.R * (1 + tol))
        out += [f"inlet point {i}: not on the inlet disc" for i in np.nonzero(bad)[0]]
    s = cloud["outlet"]
    if len(s):
        bad = (np.abs(s.x[:, 1] - L) > tol) | (r(s) > radius_profile(domain, L) * (1 + tol))
        out += [f"outlet point {i}: not on the outlet disc" for i in np.nonzero(bad)[0]]
    s = cloud["wall"]
    if len(s):
        x2 = np.clip(s.x[:, 1], 0.0, L)
        bad = (np.abs(r(s) - radius_profile(domain, x2)) > tol) | (s.x[:, 1] < -tol) | (s.x[:, 1] > L + tol)
        out += [f"wall point {i}: off the wall surface" for i in np.nonzero(bad)[0]]
    for name in ("volume", "data"):
        s = cloud[name]
        if len(s):
            inside = (s.x[:, 1] > 0) & (s.x[:, 1] < L)
            x2 = np.clip(s.x[:, 1], 0.0, L)
            inside &= r(s) < radius_profile(domain, x2)
            out += [f"{name} point {i}: not strictly interior" for i in np.nonzero(~inside)[0]]
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

DEFAULT_COUNTS = {"inlet": 2000, "wall": 10000, "outlet": 2000, "volume": 100000}


def _disc(rng, n, radius, x2):
    r = radius * np.sqrt(rng.random(n))
    th = 2.0 * np.pi * rng.random(n)
    return np.stack([r * np.cos(th), np.full(n, float(x2)), r * np.sin(th)], axis=1)


def _wall(rng, n, spec):
    L = spec.length
    grid = np.linspace(0.0, L, 4001)
    dens = lambda x: radius_profile(spec, x) * np.sqrt(1.0 + radius_slope(spec, x) ** 2)  # noqa: E731
    top = float(dens(grid).max()) * 1.01
    out = []
    have = 0
    while have < n:
        m = max(2 * (n - have), 64)
        x2 = L * rng.random(m)
        keep = x2[rng.random(m) * top < dens(x2)]
        out.append(keep)
        have += len(keep)
    x2 = np.concatenate(out)[:n]
    th = 2.0 * np.pi * rng.random(n)
    rad = radius_profile(spec, x2)
    return np.stack([rad * np.cos(th), x2, rad * np.sin(th)], axis=1)


def _volume(rng, n, spec):
    L, rmax = spec.length, spec.max_radius
    out, have = [], 0
    while have < n:
        m = max(int(1.4 * (n - have)) + 16, 64)
        p = np.empty((m, 3))
        p[:, 0] = rmax * (2.0 * rng.random(m) - 1.0)
        p[:, 1] = L * rng.random(m)
        p[:, 2] = rmax * (2.0 * rng.random(m) - 1.0)
        ok = (p[:, 1] > 0.0) & (np.hypot(p[:, 0], p[:, 2]) < radius_profile(spec, p[:, 1]))
        out.append(p[ok])
        have += int(ok.sum())
    return np.concatenate(out)[:n]


def volume_acceptance_rate(spec: DomainSpec, n=20000, seed=0):
    rng = np.random.default_rng(seed)
    rmax = spec.max_radius
    p = np.stack([rmax * (2 * rng.random(n) - 1), spec.length * rng.random(n), rmax * (2 * rng.random(n) - 1)], 1)
    return float(np.mean(np.hypot(p[:, 0], p[:, 2]) < radius_profile(spec, p[:, 1])))


def default_truth(spec: DomainSpec, fluid: FluidParams, p_out=0.0):
    if spec.kind == "straight-pipe":
        return PoiseuilleOracle(fluid, spec.length, p_out)
    return None


def sample_domain(spec: DomainSpec, counts=None, seed=0, fluid: FluidParams | None = None, p_out=0.0):
    """Stratified cloud with boundary labels.

    Inlet labels come from the parabolic profile, wall labels are zero, and
    outlet velocities come from the truth source when one is available (the
    straight-pipe oracle); volume points carry no labels. Coordinates depend
    only on ``(spec, counts, seed)``, so clouds for different ``V`` share them.
    """
    counts = dict(DEFAULT_COUNTS if counts is None else counts)
    for k, n in counts.items():
        if k not in ("inlet", "wall", "outlet", "volume"):
            raise ConfigurationError(f"cannot sample stratum {k!r}")
        if int(n) < 1:
            raise ConfigurationError(f"count for {k} must be >= 1")
    fluid = fluid or FluidParams(R=spec.R, L=spec.length)
    if not math.isclose(fluid.R, spec.R, rel_tol=1e-12):
        raise ConfigurationError("fluid R and domain R disagree")
    rng = np.random.default_rng(seed)
    truth = default_truth(spec, fluid, p_out)
    strata = {}
    if "inlet" in counts:
        x = _disc(rng, int(counts["inlet"]), spec.R, 0.0)
        strata["inlet"] = _velocity_labels(x, parabolic_inlet(x, fluid.V, spec.R))
    if "wall" in counts:
        x = _wall(rng, int(counts["wall"]), spec)
        strata["wall"] = _velocity_labels(x, np.zeros_like(x))
    if "outlet" in counts:
        x = _disc(rng, int(counts["outlet"]), float(radius_profile(spec, spec.length)), spec.length)
        strata["outlet"] = _velocity_labels(x, truth(x)[0]) if truth is not None else Stratum(x)
    if "volume" in counts:
        strata["volume"] = Stratum(_volume(rng, int(counts["volume"]), spec))
    return StratifiedPointCloud(strata, V=fluid.V, domain=spec, truth=truth)


def _velocity_labels(x, v):
    vals = np.zeros((len(x), 4))
    vals[:, :3] = v
    mask = np.zeros((len(x), 4), dtype=bool)
    mask[:, :3] = True
    return Stratum(x, vals, mask)


def label_full(x, truth):
    v, p = truth(x)
    vals = np.concatenate([v, p[:, None]], axis=1)
    return Stratum(x, vals, np.ones(vals.shape, dtype=bool))


# ---------------------------------------------------------------------------
# data scenarios
# ---------------------------------------------------------------------------

CROSS_SECTION_TOL = 0.00142  # half-width as a fraction of length
LONGITUDINAL_TOL = 0.0147  # half-width as a fraction of R


@dataclass(frozen=True)
class DataScenario:
    kind: str = "random"  # cross-section | longitudinal | random
    n_slices: int = 5
    fraction: float = 0.003
    tolerance: float | None = None  # metres; None -> defaults above

    def __post_init__(self):
        if self.kind not in ("cross-section", "longitudinal", "random"):
            raise ConfigurationError(f"unknown data scenario {self.kind!r}")
        if self.kind == "random" and not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError("random fraction must lie in (0, 1]")
        if self.kind != "random" and self.n_slices < 1:
            raise ConfigurationError("n_slices must be >= 1")


def slice_stations(length, n):
    return length * (np.arange(1, n + 1) / (n + 1))


def extract_data_scenario(cloud: StratifiedPointCloud, scenario: DataScenario, seed=0, truth=None):
    """Select labelled data points from the volume stratum."""
    vol = cloud["volume"]
    if not len(vol):
        raise ConfigurationError("volume stratum is empty")
    truth = truth or cloud.truth
    if truth is None:
        raise ConfigurationError("no truth source attached to the cloud for labelling data points")
    domain = cloud.domain
    x = vol.x
    if scenario.kind == "cross-section":
        length = domain.length if domain else float(x[:, 1].max())
        tol = scenario.tolerance if scenario.tolerance is not None else CROSS_SECTION_TOL * length
        st = slice_stations(length, scenario.n_slices)
        sel = np.any(np.abs(x[:, 1:2] - st[None, :]) <= tol, axis=1)
        idx = np.nonzero(sel)[0]
    elif scenario.kind == "longitudinal":
        R = domain.R if domain else float(np.hypot(x[:, 0], x[:, 2]).max())
        tol = scenario.tolerance if scenario.tolerance is not None else LONGITUDINAL_TOL * R
        idx = np.nonzero(np.abs(x[:, 2]) <= tol)[0]
    else:
        rng = np.random.default_rng(seed)
        n = len(vol) if scenario.fraction >= 1.0 else int(round(scenario.fraction * len(vol)))
        idx = np.sort(rng.choice(len(vol), size=n, replace=False)) if n < len(vol) else np.arange(len(vol))
    if len(idx) == 0:
        raise DegenerateScenarioError(f"{scenario.kind} scenario selected no points")
    return label_full(x[idx], truth)


def with_data_scenario(cloud, scenario, seed=0):
    return cloud.with_stratum("data", extract_data_scenario(cloud, scenario, seed))


# ---------------------------------------------------------------------------
# splitting and noise
# ---------------------------------------------------------------------------


def split(cloud: StratifiedPointCloud, fractions=(0.68, 0.02, 0.30), seed=0):
    """Stratified random partition into (train, val, test) clouds."""
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0.0) or np.any(f > 1.0):
        raise ConfigurationError("split fractions must be three values in [0, 1]")
    if abs(f.sum() - 1.0) > 1e-12:
        raise ConfigurationError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    parts = [{}, {}, {}]
    for name in STRATA:
        s = cloud[name]
        n = len(s)
        perm = rng.permutation(n)
        n_tr = int(round(f[0] * n))
        n_va = min(int(round(f[1] * n)), n - n_tr)
        cuts = [perm[:n_tr], perm[n_tr : n_tr + n_va], perm[n_tr + n_va :]]
        for part, idx in zip(parts, cuts):
            part[name] = s.take(np.sort(idx))
    return tuple(replace(cloud, strata=p) for p in parts)


def inject_noise(cloud: StratifiedPointCloud, level, max_velocity, seed=0):
    """Gaussian velocity noise (sigma = level * max_velocity) on data points only."""
    if not 0.0 <= level <= 0.25:
        warnings.warn(f"noise level {level} outside the studied range [0, 0.25]", stacklevel=2)
    d = cloud["data"]
    if not len(d) or not d.mask[:, :3].all():
        raise ConfigurationError("data stratum needs velocity labels for noise injection")
    sigma = level * max_velocity
    rng = np.random.default_rng(seed)
    vals = d.values.copy()
    if sigma > 0:
        vals[:, :3] += rng.normal(0.0, sigma, size=(len(d), 3))
    return cloud.with_stratum("data", Stratum(d.x, vals, d.mask))


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def export_csv(cloud: StratifiedPointCloud, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for name in STRATA:
            s = cloud[name]
            for i in range(len(s)):
                row = [repr(float(c)) for c in s.x[i]]
                row += [repr(float(s.values[i, k])) if s.mask[i, k] else "" for k in range(4)]
                row.append(name)
                w.writerow(row)


def ingest_point_cloud(path, domain: DomainSpec | None = None, V=None, validate=True):
    """Read a point-cloud CSV. Malformed rows raise with their line number."""
    rows = {k: ([], [], []) for k in STRATA}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise ValidationError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 8:
                raise ValidationError(f"{path}: line {lineno}: expected 8 fields, got {len(row)}")
            name = row[7].strip()
            if name not in STRATA:
                raise ValidationError(f"{path}: line {lineno}: unknown stratum {name!r}")
            try:
                x = [float(c) for c in row[:3]]
                vals = [float(c) if c.strip() else 0.0 for c in row[3:7]]
            except ValueError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from None
            mask = [bool(c.strip()) for c in row[3:7]]
            rows[name][0].append(x)
            rows[name][1].append(vals)
            rows[name][2].append(mask)
    strata = {
        k: Stratum(np.array(x).reshape(-1, 3), np.array(v).reshape(-1, 4), np.array(m, dtype=bool).reshape(-1, 4))
        for k, (x, v, m) in rows.items()
    }
    cloud = StratifiedPointCloud(strata, V=V, domain=domain)
    if validate:
        problems = cloud.validate(domain)
        if problems:
            raise ValidationError(f"{path}: {len(problems)} invariant violation(s)", problems)
    return cloud
