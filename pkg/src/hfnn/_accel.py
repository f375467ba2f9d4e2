"""Hot kernels with a numba path and a pure-numpy fallback.

Set ``HFNN_DISABLE_NUMBA=1`` to force the numpy implementations (useful for
debugging and for the benchmark in ``benchmarks/``). The two paths compute the
same formulas; results agree to rounding, not necessarily bit for bit.
"""

import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _flag("HFNN_DISABLE_NUMBA")

# scalar tape op codes
OP_CONST = 0
OP_INPUT = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_NEG = 6
OP_TANH = 7
OP_SIN = 8
OP_COS = 9
OP_EXP = 10
OP_POWI = 11


# ---------------------------------------------------------------------------
# tanh on a second-order jet
#
# A jet array has shape (K, B, W): slot 0 is the value, slots 1..n the first
# directional derivatives, slots n+1..2n the matching pure second derivatives.
# K == 1 means value only.
# ---------------------------------------------------------------------------


def _tanh_jet_forward_np(z, n):
    h = np.tanh(z[0])
    out = np.empty_like(z)
    out[0] = h
    if n:
        s = 1.0 - h * h
        d1 = z[1 : 1 + n]
        out[1 : 1 + n] = s * d1
        out[1 + n :] = s * z[1 + n :] - 2.0 * h * s * d1 * d1
    return out


def _tanh_jet_backward_np(z, h, g, n):
    s = 1.0 - h * h
    dz = np.empty_like(z)
    dz0 = g[0] * s
    if n:
        d1 = z[1 : 1 + n]
        d2 = z[1 + n :]
        g1 = g[1 : 1 + n]
        g2 = g[1 + n :]
        ds = -2.0 * h * s
        dz0 = dz0 + ds * ((g1 * d1).sum(axis=0) + (g2 * d2).sum(axis=0))
        dz0 = dz0 + (4.0 * h * h * s - 2.0 * s * s) * (g2 * d1 * d1).sum(axis=0)
        dz[1 : 1 + n] = g1 * s - 4.0 * h * s * g2 * d1
        dz[1 + n :] = g2 * s
    dz[0] = dz0
    return dz


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _tanh_jet_forward_nb(z, h, n):
        # value slot comes in precomputed: np.tanh is vectorised, math.tanh in a loop is not
        K, B, W = z.shape
        out = np.empty_like(z)
        for b in range(B):
            for w in range(W):
                hv = h[b, w]
                out[0, b, w] = hv
                s = 1.0 - hv * hv
                for j in range(n):
                    d1 = z[1 + j, b, w]
                    out[1 + j, b, w] = s * d1
                    out[1 + n + j, b, w] = s * z[1 + n + j, b, w] - 2.0 * hv * s * d1 * d1
        return out

    @numba.njit(cache=True)
    def _tanh_jet_backward_nb(z, h, g, n):
        K, B, W = z.shape
        dz = np.empty_like(z)
        for b in range(B):
            for w in range(W):
                hv = h[b, w]
                s = 1.0 - hv * hv
                ds = -2.0 * hv * s
                dds = 4.0 * hv * hv * s - 2.0 * s * s
                acc = g[0, b, w] * s
                for j in range(n):
                    d1 = z[1 + j, b, w]
                    d2 = z[1 + n + j, b, w]
                    g1 = g[1 + j, b, w]
                    g2 = g[1 + n + j, b, w]
                    acc += ds * (g1 * d1 + g2 * d2) + dds * g2 * d1 * d1
                    dz[1 + j, b, w] = g1 * s - 4.0 * hv * s * g2 * d1
                    dz[1 + n + j, b, w] = g2 * s
                dz[0, b, w] = acc
        return dz


def tanh_jet_forward(z, n):
    """Propagate a jet through tanh. ``n`` is the number of directions."""
    if USE_NUMBA and n:
        return _tanh_jet_forward_nb(np.ascontiguousarray(z), np.tanh(z[0]), n)
    return _tanh_jet_forward_np(z, n)


def tanh_jet_backward(z, h, g, n):
    """Adjoint of :func:`tanh_jet_forward`; ``h`` is the output value slot."""
    if USE_NUMBA:
        return _tanh_jet_backward_nb(
            np.ascontiguousarray(z), np.ascontiguousarray(h), np.ascontiguousarray(g), n
        )
    return _tanh_jet_backward_np(z, h, g, n)


# ---------------------------------------------------------------------------
# gated mix h = V + t * (U - V) of three jets (modified-MLP layers)
# ---------------------------------------------------------------------------


def _gate_jet_forward_np(t, U, V, n):
    D = U - V
    h = np.empty_like(t)
    h[0] = V[0] + t[0] * D[0]
    if n:
        t1, D1 = t[1 : 1 + n], D[1 : 1 + n]
        h[1 : 1 + n] = V[1 : 1 + n] + t1 * D[0] + t[0] * D1
        h[1 + n :] = V[1 + n :] + t[1 + n :] * D[0] + 2.0 * t1 * D1 + t[0] * D[1 + n :]
    return h


def _gate_jet_backward_np(t, U, V, g, n):
    D = U - V
    gt = np.empty_like(t)
    gD = np.empty_like(t)
    gt[0] = g[0] * D[0]
    gD[0] = g[0] * t[0]
    if n:
        g1, g2 = g[1 : 1 + n], g[1 + n :]
        gt[0] += (g1 * D[1 : 1 + n]).sum(axis=0) + (g2 * D[1 + n :]).sum(axis=0)
        gD[0] += (g1 * t[1 : 1 + n]).sum(axis=0) + (g2 * t[1 + n :]).sum(axis=0)
        gt[1 : 1 + n] = g1 * D[0] + 2.0 * g2 * D[1 : 1 + n]
        gD[1 : 1 + n] = g1 * t[0] + 2.0 * g2 * t[1 : 1 + n]
        gt[1 + n :] = g2 * D[0]
        gD[1 + n :] = g2 * t[0]
    return gt, gD, g - gD


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _gate_jet_forward_nb(t, U, V, n):
        K, B, W = t.shape
        h = np.empty_like(t)
        for b in range(B):
            for w in range(W):
                t0 = t[0, b, w]
                D0 = U[0, b, w] - V[0, b, w]
                h[0, b, w] = V[0, b, w] + t0 * D0
                for j in range(n):
                    k1 = 1 + j
                    k2 = 1 + n + j
                    D1 = U[k1, b, w] - V[k1, b, w]
                    D2 = U[k2, b, w] - V[k2, b, w]
                    t1 = t[k1, b, w]
                    h[k1, b, w] = V[k1, b, w] + t1 * D0 + t0 * D1
                    h[k2, b, w] = V[k2, b, w] + t[k2, b, w] * D0 + 2.0 * t1 * D1 + t0 * D2
        return h

    @numba.njit(cache=True)
    def _gate_jet_backward_nb(t, U, V, g, n):
        K, B, W = t.shape
        gt = np.empty_like(t)
        gU = np.empty_like(t)
        gV = np.empty_like(t)
        for b in range(B):
            for w in range(W):
                t0 = t[0, b, w]
                D0 = U[0, b, w] - V[0, b, w]
                g0 = g[0, b, w]
                at = g0 * D0
                aD = g0 * t0
                for j in range(n):
                    k1 = 1 + j
                    k2 = 1 + n + j
                    g1 = g[k1, b, w]
                    g2 = g[k2, b, w]
                    D1 = U[k1, b, w] - V[k1, b, w]
                    D2 = U[k2, b, w] - V[k2, b, w]
                    t1 = t[k1, b, w]
                    t2 = t[k2, b, w]
                    at += g1 * D1 + g2 * D2
                    aD += g1 * t1 + g2 * t2
                    gt[k1, b, w] = g1 * D0 + 2.0 * g2 * D1
                    gt[k2, b, w] = g2 * D0
                    d1 = g1 * t0 + 2.0 * g2 * t1
                    d2 = g2 * t0
                    gU[k1, b, w] = d1
                    gU[k2, b, w] = d2
                    gV[k1, b, w] = g1 - d1
                    gV[k2, b, w] = g2 - d2
                gt[0, b, w] = at
                gU[0, b, w] = aD
                gV[0, b, w] = g0 - aD
        return gt, gU, gV


def gate_jet_forward(t, U, V, n):
    """``V + t * (U - V)`` on jets with the Leibniz rule."""
    if USE_NUMBA:
        c = np.ascontiguousarray
        return _gate_jet_forward_nb(c(t), c(U), c(V), n)
    return _gate_jet_forward_np(t, U, V, n)


def gate_jet_backward(t, U, V, g, n):
    """Adjoints ``(g_t, g_U, g_V)`` of :func:`gate_jet_forward`."""
    if USE_NUMBA:
        c = np.ascontiguousarray
        return _gate_jet_backward_nb(c(t), c(U), c(V), c(g), n)
    return _gate_jet_backward_np(t, U, V, g, n)


# ---------------------------------------------------------------------------
# scalar tape sweeps
# ---------------------------------------------------------------------------


def _forward_sweep_py(ops, a, b, k, val):
    for i in range(len(ops)):
        op = ops[i]
        if op <= OP_INPUT:
            continue
        x = val[a[i]]
        if op == OP_ADD:
            val[i] = x + val[b[i]]
        elif op == OP_SUB:
            val[i] = x - val[b[i]]
        elif op == OP_MUL:
            val[i] = x * val[b[i]]
        elif op == OP_DIV:
            val[i] = x / val[b[i]]
        elif op == OP_NEG:
            val[i] = -x
        elif op == OP_TANH:
            val[i] = math.tanh(x)
        elif op == OP_SIN:
            val[i] = math.sin(x)
        elif op == OP_COS:
            val[i] = math.cos(x)
        elif op == OP_EXP:
            val[i] = math.exp(x)
        else:
            val[i] = x ** k[i]
    return val


def _backward_sweep_py(ops, a, b, k, val, root):
    adj = np.zeros(root + 1)
    adj[root] = 1.0
    for i in range(root, -1, -1):
        g = adj[i]
        op = ops[i]
        if g == 0.0 or op <= OP_INPUT:
            continue
        ia = a[i]
        if op == OP_ADD:
            adj[ia] += g
            adj[b[i]] += g
        elif op == OP_SUB:
            adj[ia] += g
            adj[b[i]] -= g
        elif op == OP_MUL:
            adj[ia] += g * val[b[i]]
            adj[b[i]] += g * val[ia]
        elif op == OP_DIV:
            y = val[b[i]]
            adj[ia] += g / y
            adj[b[i]] -= g * val[ia] / (y * y)
        elif op == OP_NEG:
            adj[ia] -= g
        elif op == OP_TANH:
            adj[ia] += g * (1.0 - val[i] * val[i])
        elif op == OP_SIN:
            adj[ia] += g * math.cos(val[ia])
        elif op == OP_COS:
            adj[ia] -= g * math.sin(val[ia])
        elif op == OP_EXP:
            adj[ia] += g * val[i]
        else:
            adj[ia] += g * k[i] * val[ia] ** (k[i] - 1)
    return adj


def _hvp_sweep_py(ops, a, b, k, val, root, seed):
    """Forward-over-reverse: ``d/dx_seed`` of every adjoint of ``root``.

    Returns ``(adj, adj_dot)``; ``adj_dot[j]`` is the Hessian entry
    ``d^2 root / (dx_seed dx_j)``.
    """
    n = root + 1
    dv = np.zeros(n)
    dv[seed] = 1.0
    for i in range(n):
        op = ops[i]
        if op <= OP_INPUT:
            continue
        ia = a[i]
        da = dv[ia]
        if op == OP_ADD:
            dv[i] = da + dv[b[i]]
        elif op == OP_SUB:
            dv[i] = da - dv[b[i]]
        elif op == OP_MUL:
            dv[i] = da * val[b[i]] + val[ia] * dv[b[i]]
        elif op == OP_DIV:
            dv[i] = (da - val[i] * dv[b[i]]) / val[b[i]]
        elif op == OP_NEG:
            dv[i] = -da
        elif op == OP_TANH:
            dv[i] = (1.0 - val[i] * val[i]) * da
        elif op == OP_SIN:
            dv[i] = math.cos(val[ia]) * da
        elif op == OP_COS:
            dv[i] = -math.sin(val[ia]) * da
        elif op == OP_EXP:
            dv[i] = val[i] * da
        else:
            dv[i] = k[i] * val[ia] ** (k[i] - 1) * da
    adj = np.zeros(n)
    ad = np.zeros(n)
    adj[root] = 1.0
    for i in range(root, -1, -1):
        g = adj[i]
        gd = ad[i]
        op = ops[i]
        if (g == 0.0 and gd == 0.0) or op <= OP_INPUT:
            continue
        ia = a[i]
        da = dv[ia]
        if op == OP_ADD:
            adj[ia] += g
            ad[ia] += gd
            adj[b[i]] += g
            ad[b[i]] += gd
        elif op == OP_SUB:
            adj[ia] += g
            ad[ia] += gd
            adj[b[i]] -= g
            ad[b[i]] -= gd
        elif op == OP_MUL:
            ib = b[i]
            adj[ia] += g * val[ib]
            ad[ia] += gd * val[ib] + g * dv[ib]
            adj[ib] += g * val[ia]
            ad[ib] += gd * val[ia] + g * da
        elif op == OP_DIV:
            ib = b[i]
            y = val[ib]
            dy = dv[ib]
            adj[ia] += g / y
            ad[ia] += gd / y - g * dy / (y * y)
            adj[ib] -= g * val[ia] / (y * y)
            ad[ib] -= (gd * val[ia] + g * da) / (y * y) - 2.0 * g * val[ia] * dy / (y * y * y)
        elif op == OP_NEG:
            adj[ia] -= g
            ad[ia] -= gd
        elif op == OP_TANH:
            t = val[i]
            d = 1.0 - t * t
            adj[ia] += g * d
            ad[ia] += gd * d - 2.0 * g * t * d * da
        elif op == OP_SIN:
            c = math.cos(val[ia])
            adj[ia] += g * c
            ad[ia] += gd * c - g * math.sin(val[ia]) * da
        elif op == OP_COS:
            sn = math.sin(val[ia])
            adj[ia] -= g * sn
            ad[ia] -= gd * sn + g * math.cos(val[ia]) * da
        elif op == OP_EXP:
            e = val[i]
            adj[ia] += g * e
            ad[ia] += gd * e + g * e * da
        else:
            kk = k[i]
            c = kk * val[ia] ** (kk - 1)
            adj[ia] += g * c
            ad[ia] += gd * c
            if kk != 1:
                ad[ia] += g * kk * (kk - 1) * val[ia] ** (kk - 2) * da
    return adj, ad


if HAVE_NUMBA:
    _forward_sweep_nb = numba.njit(cache=True)(_forward_sweep_py)
    _backward_sweep_nb = numba.njit(cache=True)(_backward_sweep_py)
    _hvp_sweep_nb = numba.njit(cache=True)(_hvp_sweep_py)


def forward_sweep(ops, a, b, k, val):
    """Recompute every non-leaf node value in place (nodes are topologically ordered)."""
    if USE_NUMBA:
        return _forward_sweep_nb(ops, a, b, k, val)
    return _forward_sweep_py(ops, a, b, k, val)


def backward_sweep(ops, a, b, k, val, root):
    """Adjoints of every node ``<= root`` for a unit seed at ``root``."""
    if USE_NUMBA:
        return _backward_sweep_nb(ops, a, b, k, val, root)
    return _backward_sweep_py(ops, a, b, k, val, root)


def hvp_sweep(ops, a, b, k, val, root, seed):
    """Adjoints of ``root`` and their derivatives along input ``seed``."""
    if USE_NUMBA:
        return _hvp_sweep_nb(ops, a, b, k, val, root, seed)
    return _hvp_sweep_py(ops, a, b, k, val, root, seed)


def norm(x) -> float:
    """Euclidean norm via numpy's pairwise sum.

    ``np.linalg.norm`` goes through BLAS ``dot``, whose rounding depends on
    the BLAS thread count; this keeps results identical across thread counts.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    return math.sqrt(float(np.sum(x * x)))
