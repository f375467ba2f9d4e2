"""Scalar reverse-mode differentiation on an append-only tape.

Every arithmetic operation on :class:`Var` appends one node and evaluates it
eagerly, so node ids are topological by construction. The tape can be
re-evaluated for new input values with :meth:`Tape.forward`; the numeric
sweeps run through :mod:`hfnn._accel`.

Second derivatives with respect to inputs are obtained by writing the adjoint
computation itself onto the tape (reverse-over-reverse) and sweeping again.
"""

import math

import numpy as np

from .. import _accel
from .._accel import (
    OP_ADD,
    OP_CONST,
    OP_COS,
    OP_DIV,
    OP_EXP,
    OP_INPUT,
    OP_MUL,
    OP_NEG,
    OP_POWI,
    OP_SIN,
    OP_SUB,
    OP_TANH,
)
from ..errors import ConfigurationError, UsageError

OP_NAMES = {
    OP_CONST: "constant",
    OP_INPUT: "input",
    OP_ADD: "add",
    OP_SUB: "sub",
    OP_MUL: "mul",
    OP_DIV: "div",
    OP_NEG: "neg",
    OP_TANH: "tanh",
    OP_SIN: "sin",
    OP_COS: "cos",
    OP_EXP: "exp",
    OP_POWI: "pow-int",
}

_UNARY = {
    OP_NEG: lambda x, k: -x,
    OP_TANH: lambda x, k: math.tanh(x),
    OP_SIN: lambda x, k: math.sin(x),
    OP_COS: lambda x, k: math.cos(x),
    OP_EXP: lambda x, k: math.exp(x),
    OP_POWI: lambda x, k: x**k,
}
_BINARY = {
    OP_ADD: lambda x, y: x + y,
    OP_SUB: lambda x, y: x - y,
    OP_MUL: lambda x, y: x * y,
    OP_DIV: lambda x, y: x / y,
}


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "id")

    def __init__(self, tape, node_id):
        self.tape = tape
        self.id = node_id

    @property
    def value(self):
        return self.tape._val[self.id]

    @property
    def op(self):
        return OP_NAMES[self.tape._ops[self.id]]

    def _lift(self, other):
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise UsageError("cannot combine nodes from different tapes")
            return other
        return self.tape.constant(float(other))

    def __add__(self, other):
        return self.tape._binary(OP_ADD, self, self._lift(other))

    def __radd__(self, other):
        return self.tape._binary(OP_ADD, self._lift(other), self)

    def __sub__(self, other):
        return self.tape._binary(OP_SUB, self, self._lift(other))

    def __rsub__(self, other):
        return self.tape._binary(OP_SUB, self._lift(other), self)

    def __mul__(self, other):
        return self.tape._binary(OP_MUL, self, self._lift(other))

    def __rmul__(self, other):
        return self.tape._binary(OP_MUL, self._lift(other), self)

    def __truediv__(self, other):
        return self.tape._binary(OP_DIV, self, self._lift(other))

    def __rtruediv__(self, other):
        return self.tape._binary(OP_DIV, self._lift(other), self)

    def __neg__(self):
        return self.tape._unary(OP_NEG, self)

    def __pow__(self, k):
        if not isinstance(k, (int, np.integer)):
            raise UsageError("only integer powers are supported on the tape")
        return self.tape._unary(OP_POWI, self, int(k))

    def tanh(self):
        return self.tape._unary(OP_TANH, self)

    def sin(self):
        return self.tape._unary(OP_SIN, self)

    def cos(self):
        return self.tape._unary(OP_COS, self)

    def exp(self):
        return self.tape._unary(OP_EXP, self)

    def __repr__(self):
        return f"Var(id={self.id}, op={self.op}, value={self.value!r})"


def tanh(x):
    return x.tanh() if isinstance(x, Var) else math.tanh(x)


def sin(x):
    return x.sin() if isinstance(x, Var) else math.sin(x)


def cos(x):
    return x.cos() if isinstance(x, Var) else math.cos(x)


def exp(x):
    return x.exp() if isinstance(x, Var) else math.exp(x)


class Tape:
    """Append-only scalar computation graph.

    Nodes are stored column-wise (op code, operand ids, integer exponent,
    cached value). ``live`` marks nodes that depend on at least one input;
    adjoint graphs are only built through live nodes.
    """

    def __init__(self):
        self._ops = []
        self._a = []
        self._b = []
        self._k = []
        self._val = []
        self._live = []
        self._inputs = []
        self._const_pool = {}
        self._grad_cache = {}
        self._arrays = None  # (length, arrays) view reused until the tape changes
        self._mark = 0

    def __len__(self):
        return len(self._ops)

    # -- construction -------------------------------------------------------

    def _push(self, op, a, b, k, value, live):
        self._ops.append(op)
        self._a.append(a)
        self._b.append(b)
        self._k.append(k)
        self._val.append(value)
        self._live.append(live)
        return Var(self, len(self._ops) - 1)

    def input(self, value=0.0):
        """Register a new input node and return it."""
        v = self._push(OP_INPUT, -1, -1, 0, float(value), True)
        self._inputs.append(v.id)
        return v

    def inputs(self, values):
        return [self.input(x) for x in values]

    def constant(self, value):
        value = float(value)
        key = value.hex()  # keeps 0.0 and -0.0 apart
        node = self._const_pool.get(key)
        if node is None:
            v = self._push(OP_CONST, -1, -1, 0, value, False)
            self._const_pool[key] = v.id
            return v
        return Var(self, node)

    def _unary(self, op, x, k=0):
        return self._push(op, x.id, -1, k, _UNARY[op](self._val[x.id], k), self._live[x.id])

    def _binary(self, op, x, y):
        value = _BINARY[op](self._val[x.id], self._val[y.id])
        return self._push(op, x.id, y.id, 0, value, self._live[x.id] or self._live[y.id])

    # -- bookkeeping --------------------------------------------------------

    @property
    def input_ids(self):
        return list(self._inputs)

    def is_input(self, node):
        node_id = node.id if isinstance(node, Var) else int(node)
        return 0 <= node_id < len(self._ops) and self._ops[node_id] == OP_INPUT

    def checkpoint(self):
        """Remember the current length; :meth:`reset` truncates back to it."""
        self._mark = len(self._ops)
        return self._mark

    def reset(self):
        """Drop every node appended after the last :meth:`checkpoint`."""
        m = self._mark
        for col in (self._ops, self._a, self._b, self._k, self._val, self._live):
            del col[m:]
        self._inputs = [i for i in self._inputs if i < m]
        self._const_pool = {c: i for c, i in self._const_pool.items() if i < m}
        self._grad_cache = {}
        self._arrays = None

    def arrays(self):
        """Column arrays of the tape; treat them as read-only."""
        n = len(self._ops)
        if self._arrays is None or self._arrays[0] != n:
            self._arrays = (n, (
                np.asarray(self._ops, dtype=np.int64),
                np.asarray(self._a, dtype=np.int64),
                np.asarray(self._b, dtype=np.int64),
                np.asarray(self._k, dtype=np.int64),
                np.asarray(self._val, dtype=np.float64),
            ))
        return self._arrays[1]

    # -- evaluation ---------------------------------------------------------

    def forward(self, inputs, root=None):
        """Re-evaluate the tape for new input values.

        ``inputs`` is a sequence aligned with registration order, or a mapping
        from input id (or :class:`Var`) to value. Returns the value of ``root``
        (default: the last node).
        """
        if isinstance(inputs, dict):
            bound = {(k.id if isinstance(k, Var) else int(k)): float(v) for k, v in inputs.items()}
            missing = [i for i in self._inputs if i not in bound]
            if missing:
                raise ConfigurationError(f"no value supplied for input node(s) {missing}")
        else:
            values = list(inputs)
            if len(values) != len(self._inputs):
                raise ConfigurationError(
                    f"expected {len(self._inputs)} input values, got {len(values)}"
                )
            bound = dict(zip(self._inputs, map(float, values)))
        ops, a, b, k, val = self.arrays()
        val = val.copy()
        for i, x in bound.items():
            val[i] = x
        _accel.forward_sweep(ops, a, b, k, val)
        self._val = val.tolist()
        self._arrays = None
        root_id = len(self._ops) - 1 if root is None else _node_id(root)
        return self._val[root_id]

    def gradient(self, root, wrt):
        """Numeric adjoints ``d root / d wrt[k]`` from one backward sweep."""
        if isinstance(root, (list, tuple, np.ndarray)):
            raise UsageError("gradient() needs a single scalar root node")
        root_id = _node_id(root)
        ops, a, b, k, val = self.arrays()
        adj = _accel.backward_sweep(ops, a, b, k, val, root_id)
        out = np.zeros(len(wrt))
        for j, w in enumerate(wrt):
            wid = _node_id(w)
            if wid <= root_id:
                out[j] = adj[wid]
        return out

    def gradient_graph(self, root):
        """Write the adjoint of ``root`` onto the tape.

        Returns a dict mapping every live node id reachable from ``root`` to a
        :class:`Var` holding ``d root / d node``. Results are cached per root.
        """
        root_id = _node_id(root)
        cached = self._grad_cache.get(root_id)
        if cached is not None:
            return cached
        adj = {root_id: self.constant(1.0)}
        ops, a_, b_, k_ = self._ops, self._a, self._b, self._k
        live = self._live

        def acc(node, contrib):
            if not live[node]:
                return
            prev = adj.get(node)
            adj[node] = contrib if prev is None else prev + contrib

        for i in range(root_id, -1, -1):
            g = adj.get(i)
            if g is None:
                continue
            op = ops[i]
            if op <= OP_INPUT:
                continue
            x = Var(self, a_[i])
            if op == OP_ADD:
                acc(x.id, g)
                acc(b_[i], g)
            elif op == OP_SUB:
                acc(x.id, g)
                acc(b_[i], -g)
            elif op == OP_MUL:
                y = Var(self, b_[i])
                if live[y.id]:
                    acc(y.id, g * x)
                if live[x.id]:
                    acc(x.id, g * y)
            elif op == OP_DIV:
                y = Var(self, b_[i])
                if live[x.id]:
                    acc(x.id, g / y)
                if live[y.id]:
                    acc(y.id, -(g * Var(self, i)) / y)
            elif op == OP_NEG:
                acc(x.id, -g)
            elif op == OP_TANH:
                t = Var(self, i)
                acc(x.id, g * (1.0 - t * t))
            elif op == OP_SIN:
                acc(x.id, g * x.cos())
            elif op == OP_COS:
                acc(x.id, -(g * x.sin()))
            elif op == OP_EXP:
                acc(x.id, g * Var(self, i))
            elif op == OP_POWI:
                kk = k_[i]
                if kk == 1:
                    acc(x.id, g)
                elif kk == 2:
                    acc(x.id, g * (2.0 * x))
                else:
                    acc(x.id, g * (kk * x ** (kk - 1)))
        self._grad_cache[root_id] = adj
        return adj

    def input_hessian_diag(self, root, wrt):
        """``d^2 root / d wrt^2`` for an input node ``wrt`` (forward-over-reverse sweep)."""
        wid = _node_id(wrt)
        if not self.is_input(wid):
            raise UsageError(f"node {wid} is not an input node")
        root_id = _node_id(root)
        if wid > root_id:
            return 0.0
        ops, a, b, k, val = self.arrays()
        _, ad = _accel.hvp_sweep(ops, a, b, k, val, root_id, wid)
        return float(ad[wid])


def _node_id(node):
    if isinstance(node, Var):
        return node.id
    if isinstance(node, (int, np.integer)):
        return int(node)
    raise UsageError(f"expected a tape node, got {type(node).__name__}")


def forward(tape, inputs, root=None):
    return tape.forward(inputs, root)


def gradient(tape, root, wrt):
    return tape.gradient(root, wrt)


def input_hessian_diag(tape, root, wrt):
    return tape.input_hessian_diag(root, wrt)
