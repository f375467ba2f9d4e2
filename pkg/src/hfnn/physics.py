"""Steady incompressible Navier-Stokes residuals, inlet profile and pipe oracle.

Coordinates are ``(x1, x2, x3)`` with the flow along ``x2`` and the inlet
centre at the origin. Pressures are gauge pressures relative to the outlet.

Residual convention (dimensional; the dimensionless form swaps ``rho, mu`` for
``1, 1/Re``)::

    e_i = rho * (v . grad) v_i + dp/dx_i - mu * lap(v_i),   i = 1, 2, 3
    e_4 = div v
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .autodiff import tensor as T
from .errors import ConfigurationError, DomainError, UsageError

DIMENSIONAL = "dimensional"
DIMENSIONLESS = "dimensionless"
FRAMES = (DIMENSIONAL, DIMENSIONLESS)


@dataclass(frozen=True)
class FluidParams:
    rho: float = 1060.0
    mu: float = 0.00399
    V: float = 0.1
    R: float = 0.010065
    L: float = 0.26009

    def __post_init__(self):
        bad = [k for k in ("rho", "mu", "V", "R", "L") if not getattr(self, k) > 0]
        if bad:
            raise ConfigurationError(f"fluid parameters must be strictly positive: {', '.join(bad)}")

    @property
    def D(self) -> float:
        return 2.0 * self.R

    def with_velocity(self, V) -> FluidParams:
        return FluidParams(self.rho, self.mu, float(V), self.R, self.L)


def reynolds(params: FluidParams) -> float:
    return params.rho * params.D * params.V / params.mu


def coefficients(params: FluidParams, frame: str):
    """(convective, viscous) coefficients of the momentum residual."""
    if frame == DIMENSIONAL:
        return params.rho, params.mu
    if frame == DIMENSIONLESS:
        return 1.0, 1.0 / reynolds(params)
    raise ConfigurationError(f"unknown frame {frame!r}")


@dataclass
class FlowField:
    points: np.ndarray
    v: np.ndarray
    p: np.ndarray
    frame: str = DIMENSIONAL

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.v = np.atleast_2d(np.asarray(self.v, dtype=np.float64))
        self.p = np.atleast_1d(np.asarray(self.p, dtype=np.float64))
        n = len(self.points)
        if len(self.v) != n or len(self.p) != n:
            raise ConfigurationError("points, v and p must have the same length")
        if self.frame not in FRAMES:
            raise ConfigurationError(f"unknown frame {self.frame!r}")


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


def scales(params: FluidParams):
    """Characteristic (length, velocity, pressure)."""
    return params.D, params.V, params.rho * params.V**2


def nondimensionalize(obj, params: FluidParams):
    """FlowField or raw coordinates to the dimensionless frame."""
    D, V, P = scales(params)
    if isinstance(obj, FlowField):
        if obj.frame != DIMENSIONAL:
            raise UsageError("field is already dimensionless")
        return FlowField(obj.points / D, obj.v / V, obj.p / P, DIMENSIONLESS)
    return np.asarray(obj, dtype=np.float64) / D


def redimensionalize(obj, params: FluidParams):
    D, V, P = scales(params)
    if isinstance(obj, FlowField):
        if obj.frame != DIMENSIONLESS:
            raise UsageError("field is already dimensional")
        return FlowField(obj.points * D, obj.v * V, obj.p * P, DIMENSIONAL)
    return np.asarray(obj, dtype=np.float64) * D


# ---------------------------------------------------------------------------
# profiles and oracle
# ---------------------------------------------------------------------------

_TOL = 1e-12


def _radius(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(x[..., 0] ** 2 + x[..., 2] ** 2)


def parabolic_inlet(x, V, R):
    """``(0, V (1 - r^2/R^2), 0)`` at inlet-plane point(s) ``x``."""
    x = np.asarray(x, dtype=np.float64)
    r = _radius(x)
    if np.any(r > R * (1 + _TOL)):
        raise DomainError(f"point outside the inlet disc (r={float(np.max(r))!r} > R={R!r})")
    v = np.zeros(x.shape)
    v[..., 1] = V * (1.0 - (r / R) ** 2)
    return v


def poiseuille_oracle(x, params: FluidParams, Lp=None, p_out=0.0):
    """Exact straight-pipe solution: returns ``(v, p)`` in SI units."""
    Lp = params.L if Lp is None else Lp
    x = np.asarray(x, dtype=np.float64)
    r = _radius(x)
    x2 = x[..., 1]
    if np.any(r > params.R * (1 + _TOL)) or np.any(x2 < -_TOL * Lp) or np.any(x2 > Lp * (1 + _TOL)):
        raise DomainError("point outside the straight pipe")
    v = np.zeros(x.shape)
    v[..., 1] = params.V * (1.0 - (r / params.R) ** 2)
    p = p_out + pressure_gradient(params) * (Lp - x2)
    return v, p


def pressure_gradient(params: FluidParams) -> float:
    """Magnitude of the axial pressure gradient of Poiseuille flow."""
    return 4.0 * params.mu * params.V / params.R**2


class PoiseuilleOracle:
    """Callable truth source ``x -> (v, p)`` (SI units) for a straight pipe."""

    kind = "poiseuille"

    def __init__(self, params: FluidParams, Lp=None, p_out=0.0):
        self.params = params
        self.Lp = params.L if Lp is None else float(Lp)
        self.p_out = float(p_out)

    def __call__(self, x):
        return poiseuille_oracle(x, self.params, self.Lp, self.p_out)

    def field(self, frame=DIMENSIONLESS):
        return poiseuille_field(self.params, self.Lp, self.p_out, frame)


def poiseuille_field(params: FluidParams, Lp=None, p_out=0.0, frame=DIMENSIONLESS):
    """The oracle written with tape-friendly arithmetic, for residual checks."""
    Lp = params.L if Lp is None else Lp
    G = pressure_gradient(params)
    D, V, P = scales(params)

    def fn(xs):
        x1, x2, x3 = xs
        if frame == DIMENSIONLESS:
            # r^2/R^2 = 4 r*^2 since D = 2R
            v2 = 1.0 - 4.0 * (x1 * x1 + x3 * x3)
            p = (p_out + G * Lp) / P - (G * D / P) * x2
        else:
            v2 = V - (V / params.R**2) * (x1 * x1 + x3 * x3)
            p = (p_out + G * Lp) - G * x2
        zero = 0.0 * x1
        return [zero, v2, zero, p]

    fn.frame = frame
    return fn


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def residual_terms(val, d1, d2, c_conv, c_visc):
    """Momentum and continuity residuals from derivative tables.

    ``val[i]`` is output ``i`` (three velocities then pressure), ``d1[i][j]``
    its first derivative along ``x_j`` and ``d2[i][j]`` the pure second
    derivative. Works for floats, numpy arrays and tape Vars alike.
    """
    out = []
    for i in range(3):
        conv = val[0] * d1[i][0] + val[1] * d1[i][1] + val[2] * d1[i][2]
        lap = d2[i][0] + d2[i][1] + d2[i][2]
        out.append(c_conv * conv + d1[3][i] - c_visc * lap)
    out.append(d1[0][0] + d1[1][1] + d1[2][2])
    return out


def nse_residual(field_fn, x, params: FluidParams, frame=DIMENSIONLESS):
    """Residual 4-vector(s) of a tape-differentiable field at point(s) ``x``.

    ``field_fn`` maps three tape Vars to four (v1, v2, v3, p). If it carries a
    ``frame`` attribute it must match ``frame``.
    """
    fn_frame = getattr(field_fn, "frame", None)
    if fn_frame is not None and fn_frame != frame:
        raise UsageError(f"field is in the {fn_frame} frame, residual requested in the {frame} frame")
    c_conv, c_visc = coefficients(params, frame)
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty((len(pts), 4))
    for n, pt in enumerate(pts):
        tp = Tape()
        xs = tp.inputs(pt)
        outs = list(field_fn(xs))
        if len(outs) != 4:
            raise ConfigurationError("field must return four outputs (v1, v2, v3, p)")
        outs = [o if hasattr(o, "tape") else tp.constant(float(o)) for o in outs]
        val = [o.value for o in outs]
        d1 = [list(tp.gradient(o, xs)) for o in outs]
        d2 = [[tp.input_hessian_diag(o, xj) for xj in xs] for o in outs]
        out[n] = residual_terms(val, d1, d2, c_conv, c_visc)
    return out[0] if np.ndim(x) == 1 else out


def nse_residual_jet(O, c_conv, c_visc):
    """Residuals ``(B, 4)`` from a network output jet ``O`` of shape ``(7, B, 4)``.

    Fused primitive: one node in the reverse graph with a hand-written adjoint.
    """
    Ov = O.value if isinstance(O, T.Tensor) else O
    u = Ov[0, :, :3]  # (B, 3)
    G = Ov[1:4, :, :3]  # (j, B, i): d u_i / d x_j
    H = Ov[4:7, :, :3]
    gradp = Ov[1:4, :, 3].T  # (B, 3)
    conv = np.einsum("bj,jbi->bi", u, G)
    lap = H.sum(axis=0)
    e = np.empty((Ov.shape[1], 4))
    e[:, :3] = c_conv * conv + gradp - c_visc * lap
    e[:, 3] = G[0, :, 0] + G[1, :, 1] + G[2, :, 2]
    if not isinstance(O, T.Tensor):
        return e

    def backward(g):
        gm, gc = g[:, :3], g[:, 3]
        gO = np.zeros_like(Ov)
        gO[0, :, :3] = c_conv * np.einsum("bi,jbi->bj", gm, G)
        gO[1:4, :, :3] = c_conv * np.einsum("bi,bj->jbi", gm, u)
        for j in range(3):
            gO[1 + j, :, j] += gc
        gO[1:4, :, 3] = gm.T
        gO[4:7, :, :3] = -c_visc * gm[None]
        return [gO]

    return T.Tensor(e, (O,), backward)


def inlet_mass_flux(V, R, n_r=1000, n_theta=16):
    """Polar midpoint-rule flux of the parabolic profile through the inlet disc."""
    hr, ht = R / n_r, 2.0 * math.pi / n_theta
    r = hr * (np.arange(n_r) + 0.5)
    theta = ht * (np.arange(n_theta) + 0.5)
    Rr, Th = np.meshgrid(r, theta, indexing="ij")
    pts = np.stack([Rr * np.cos(Th), np.zeros_like(Rr), Rr * np.sin(Th)], axis=-1)
    v2 = parabolic_inlet(pts, V, R)[..., 1]
    return float(np.sum(v2 * Rr) * hr * ht)


def mass_flux_exact(V, R):
    return math.pi * R * R * V / 2.0
