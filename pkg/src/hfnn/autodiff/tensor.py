"""Batched reverse-mode engine over numpy arrays, with second-order jet ops.

This is the training path. A *jet* is an array of shape ``(K, B, W)``: slot 0
holds values for a batch of ``B`` points, slots ``1..n`` the derivatives along
``n`` input coordinates and slots ``n+1..2n`` the matching pure second
derivatives (``K = 2n + 1``). ``K == 1`` carries values only. Input
derivatives are thus propagated forward through the network, and parameter
gradients come from a single reverse sweep over the (small) graph of fused
jet ops. The scalar :mod:`hfnn.autodiff.tape` engine is the reference this is
tested against.
"""

import numpy as np

from .. import _accel


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape})"

    # elementwise arithmetic with numpy broadcasting; constants may be arrays or floats

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    @property
    def T(self):
        return transpose(self)


def leaf(value, name=None):
    return Tensor(np.asarray(value, dtype=np.float64), name=name)


def _val(x):
    return x.value if isinstance(x, Tensor) else x


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(x, y, value, grads):
    parents = tuple(p for p in (x, y) if isinstance(p, Tensor))
    if not parents:
        return value

    def backward(g):
        out = []
        gx, gy = grads(g)
        if isinstance(x, Tensor):
            out.append(_unbroadcast(gx, x.value.shape))
        if isinstance(y, Tensor):
            out.append(_unbroadcast(gy, np.shape(y.value)))
        return out

    return Tensor(value, parents, backward)


def add(x, y):
    return _binary(x, y, _val(x) + _val(y), lambda g: (g, g))


def sub(x, y):
    return _binary(x, y, _val(x) - _val(y), lambda g: (g, -g))


def mul(x, y):
    xv, yv = _val(x), _val(y)
    return _binary(x, y, xv * yv, lambda g: (g * yv, g * xv))


def square(x):
    xv = x.value
    return Tensor(xv * xv, (x,), lambda g: [2.0 * xv * g])


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(x, idx):
    shape = x.value.shape
    basic = _is_basic(idx)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return [out]

    return Tensor(x.value[idx], (x,), backward)


def take_rows(x, rows, axis=0):
    """Gather along ``axis`` with an integer index array (rows may repeat)."""
    shape = x.value.shape

    def backward(g):
        out = np.zeros(shape)
        if axis == 0:
            np.add.at(out, rows, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), rows, np.moveaxis(g, axis, 0))
        return [out]

    return Tensor(np.take(x.value, rows, axis=axis), (x,), backward)


def transpose(x):
    return Tensor(x.value.T, (x,), lambda g: [g.T])


def reshape(x, shape):
    old = x.value.shape
    return Tensor(x.value.reshape(shape), (x,), lambda g: [g.reshape(old)])


def tsum(x, axis=None):
    shape = x.value.shape

    def backward(g):
        if axis is None:
            return [np.broadcast_to(g, shape).copy()]
        return [np.broadcast_to(np.expand_dims(g, axis), shape).copy()]

    return Tensor(np.asarray(x.value.sum(axis=axis)), (x,), backward)


def mean(x):
    shape = x.value.shape
    n = x.value.size
    return Tensor(np.asarray(x.value.mean()), (x,), lambda g: [np.full(shape, g / n)])


def masked_mse(pred, target=None, mask=None):
    """``mean over rows of sum_k mask_k (pred_k - target_k)^2`` as one node.

    ``pred`` is ``(n, c)``; ``target`` defaults to zeros and ``mask`` to all
    ones. Rows count towards the mean even when partially masked.
    """
    pv = _val(pred)
    diff = pv if target is None else pv - target
    if mask is not None:
        diff = np.where(mask, diff, 0.0)
    n = max(pv.shape[0], 1)
    value = np.asarray(np.sum(diff * diff) / n)
    if not isinstance(pred, Tensor):
        return value
    return Tensor(value, (pred,), lambda g: [(2.0 * g / n) * diff])


def stack_last(parts):
    """Stack same-shape tensors along a new trailing axis."""
    value = np.stack([p.value for p in parts], axis=-1)

    def backward(g):
        return [g[..., i] for i in range(len(parts))]

    return Tensor(value, tuple(parts), backward)


# ---------------------------------------------------------------------------
# jet primitives
# ---------------------------------------------------------------------------


def jet_dirs(k):
    return (k - 1) // 2


def input_jet(x, order=2):
    """Seed jet for raw coordinates ``x`` of shape (B, d)."""
    x = np.asarray(x, dtype=np.float64)
    if order == 0:
        return x[None].copy()
    if order != 2:
        raise ValueError("jets support order 0 or 2")
    B, d = x.shape
    j = np.zeros((2 * d + 1, B, d))
    j[0] = x
    for i in range(d):
        j[1 + i, :, i] = 1.0
    return j


def jet_affine(x, w, b=None):
    """``x @ w (+ b on the value slot)``; ``x`` is a jet, ``w`` (in, out).

    Either operand may be a constant array.
    """
    xv, wv = _val(x), _val(w)
    K, B, n_in = xv.shape
    flat = xv.reshape(K * B, n_in)
    out = (flat @ wv).reshape(K, B, -1)
    if b is not None:
        out[0] += _val(b)
    parents = tuple(p for p in (x, w, b) if isinstance(p, Tensor))
    if not parents:
        return out

    def backward(g):
        grads = []
        gflat = g.reshape(K * B, -1)
        if isinstance(x, Tensor):
            grads.append((gflat @ wv.T).reshape(K, B, n_in))
        if isinstance(w, Tensor):
            grads.append(flat.T @ gflat)
        if isinstance(b, Tensor):
            grads.append(g[0].sum(axis=0))
        return grads

    return Tensor(out, parents, backward)


def jet_tanh(z):
    zv = _val(z)
    n = jet_dirs(zv.shape[0])
    out = _accel.tanh_jet_forward(zv, n)
    if not isinstance(z, Tensor):
        return out
    return Tensor(out, (z,), lambda g: [_accel.tanh_jet_backward(zv, out[0], g, n)])


def _jet_mul_values(a, b, n):
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[0] = a[0] * b[0]
    if n:
        a1, b1 = a[1 : 1 + n], b[1 : 1 + n]
        out[1 : 1 + n] = a1 * b[0] + a[0] * b1
        out[1 + n :] = a[1 + n :] * b[0] + 2.0 * a1 * b1 + a[0] * b[1 + n :]
    return out


def _jet_mul_adjoint(g, b, n):
    """Adjoint w.r.t. the first factor of a jet product."""
    out = np.empty(np.broadcast_shapes(g.shape, b.shape))
    if n:
        g1, g2 = g[1 : 1 + n], g[1 + n :]
        out[0] = g[0] * b[0] + (g1 * b[1 : 1 + n]).sum(axis=0) + (g2 * b[1 + n :]).sum(axis=0)
        out[1 : 1 + n] = g1 * b[0] + 2.0 * g2 * b[1 : 1 + n]
        out[1 + n :] = g2 * b[0]
    else:
        out[0] = g[0] * b[0]
    return out


def jet_mul(a, b):
    """Elementwise product of two jets with the Leibniz rule.

    Both operands need the same number of slots; a value-only factor that is
    constant along the input directions should use plain :func:`mul` instead.
    """
    av, bv = _val(a), _val(b)
    if av.shape[0] != bv.shape[0]:
        raise ValueError("jet_mul needs jets of equal order")
    n = jet_dirs(av.shape[0])
    out = _jet_mul_values(av, bv, n)
    parents = tuple(p for p in (a, b) if isinstance(p, Tensor))
    if not parents:
        return out

    def backward(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(_jet_mul_adjoint(g, bv, n), av.shape))
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(_jet_mul_adjoint(g, av, n), bv.shape))
        return grads

    return Tensor(out, parents, backward)


def jet_gate(t, U, V):
    """Modified-MLP mix ``t * U + (1 - t) * V`` written as ``V + t * (U - V)``."""
    tv, Uv, Vv = _val(t), _val(U), _val(V)
    n = jet_dirs(tv.shape[0])
    out = _accel.gate_jet_forward(tv, Uv, Vv, n)
    parents = tuple(p for p in (t, U, V) if isinstance(p, Tensor))
    if not parents:
        return out

    def backward(g):
        gs = _accel.gate_jet_backward(tv, Uv, Vv, g, n)
        return [gi for p, gi in zip((t, U, V), gs) if isinstance(p, Tensor)]

    return Tensor(out, parents, backward)


def fourier_seed_jet(x, B, order=2):
    """Fourier features of raw coordinates with their input derivatives.

    Equivalent to ``fourier_jet(input_jet(x), B)`` but exploits the seed's
    constant first and zero second derivatives.
    """
    a0 = 2.0 * np.pi * (np.asarray(x, dtype=np.float64) @ B.T)
    c, s = np.cos(a0), np.sin(a0)
    e, d = B.shape
    if order == 0:
        out = np.empty((1, len(a0), 2 * e))
        out[0, :, :e] = c
        out[0, :, e:] = s
        return out
    out = np.empty((2 * d + 1, len(a0), 2 * e))
    out[0, :, :e] = c
    out[0, :, e:] = s
    w = 2.0 * np.pi * B.T  # (d, e)
    for j in range(d):
        wj = w[j]
        out[1 + j, :, :e] = -s * wj
        out[1 + j, :, e:] = c * wj
        out[1 + d + j, :, :e] = -c * (wj * wj)
        out[1 + d + j, :, e:] = -s * (wj * wj)
    return out


def fourier_jet(x_jet, B):
    """Random Fourier features ``[cos(2 pi B x), sin(2 pi B x)]`` of an input jet.

    ``x_jet`` is a constant seed jet (no parameters upstream), so the result
    is a plain array.
    """
    K = x_jet.shape[0]
    n = jet_dirs(K)
    a = 2.0 * np.pi * (x_jet @ B.T)  # (K, Bn, e): linear map keeps jet structure
    c, s = np.cos(a[0]), np.sin(a[0])
    e = B.shape[0]
    out = np.empty((K, a.shape[1], 2 * e))
    out[0, :, :e] = c
    out[0, :, e:] = s
    if n:
        d1, d2 = a[1 : 1 + n], a[1 + n :]
        out[1 : 1 + n, :, :e] = -s * d1
        out[1 : 1 + n, :, e:] = c * d1
        out[1 + n :, :, :e] = -c * d1 * d1 - s * d2
        out[1 + n :, :, e:] = -s * d1 * d1 + c * d2
    return out


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(root, leaves, seed=None):
    """Gradients of scalar ``root`` with respect to each tensor in ``leaves``.

    Leaves not reached by the graph get zero arrays. Nothing is stored on the
    tensors, so the same graph can be swept several times (e.g. per loss term).
    """
    grads = {id(root): np.ones_like(root.value) if seed is None else seed}
    for node in reversed(_toposort(root)):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return [grads.get(id(t), np.zeros_like(t.value)) for t in leaves]
