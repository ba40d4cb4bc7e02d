"""Dense matrix graphs with symbolic reverse-mode differentiation.

A :class:`Graph` is built once (shapes are checked as nodes are inserted) and
evaluated many times with different bindings for its named inputs.  Gradients
are produced by :meth:`Graph.gradients`, which appends new nodes to the same
graph.  Because derivative rules are themselves written in graph ops, a
gradient can be differentiated again; this is what lets a meta-gradient flow
through an unrolled inner loop.

Every value is a 2-D ``float64`` numpy array.  A ``(1, 1)`` array plays the
role of a scalar.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import lapack, solve_triangular

QR_RANK_TOL = 1e-12


class GraphError(ValueError):
    pass


class ShapeError(GraphError):
    def __init__(self, node_id, message):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class NonFiniteError(ArithmeticError):
    def __init__(self, node_id, op):
        super().__init__(f"node {node_id} ({op}) produced a non-finite value")
        self.node_id = node_id
        self.op = op


class NonFiniteValueError(ArithmeticError, ValueError):
    """A matrix handed to the library holds NaN or Inf."""


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, column, message=None):
        super().__init__(message or f"matrix is rank deficient at column {column}")
        self.column = column


def as_matrix(value, name="value"):
    """Copy ``value`` into a finite 2-D float64 array."""
    a = np.array(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise ValueError(f"{name}: expected a matrix, got ndim={a.ndim}")
    if a.size == 0:
        raise ValueError(f"{name}: empty matrix")
    if not np.isfinite(a).all():
        raise NonFiniteValueError(f"{name}: contains NaN or Inf")
    return a


# --------------------------------------------------------------------------
# thin QR


_UPPER_MASKS = {}


def _upper_mask(p):
    mask = _UPPER_MASKS.get(p)
    if mask is None:
        mask = _UPPER_MASKS[p] = np.triu(np.ones((p, p)))
    return mask


def qr_thin(a):
    """Householder thin QR with a strictly positive diagonal on ``R``.

    Returns ``(Q, R)`` with ``Q`` of shape ``(n, p)`` and ``R`` of shape
    ``(p, p)``.  The reflections are computed by LAPACK (``geqrf`` /
    ``orgqr``); column signs are then flipped so that ``diag(R) > 0``, which
    makes the factorization unique.  Raises :class:`RankDeficientError`
    naming the first column whose ``|R_jj|`` is at most ``QR_RANK_TOL``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("qr_thin expects a matrix")
    n, p = a.shape
    if p > n:
        raise ValueError(f"qr_thin needs rows >= cols, got {n}x{p}")
    packed, tau, _, info = lapack.dgeqrf(a)
    if info != 0:
        raise np.linalg.LinAlgError(f"dgeqrf failed with info={info}")
    r = packed[:p] * _upper_mask(p)
    d = r.diagonal()
    small = np.flatnonzero(np.abs(d) <= QR_RANK_TOL)
    if small.size:
        raise RankDeficientError(int(small[0]))
    q, _, info = lapack.dorgqr(packed, tau)
    if info != 0:
        raise np.linalg.LinAlgError(f"dorgqr failed with info={info}")
    signs = np.sign(d)
    return q * signs, r * signs[:, None]


def _copyltu(m):
    lower = np.tril(m, -1)
    return lower + lower.T + np.diag(np.diag(m))


def qr_backward(q, r, dq):
    """Adjoint of ``A -> Q`` for the positive-diagonal thin QR.

    Given the cotangent ``dQ`` of the orthonormal factor, returns ``dA``.
    """
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    dq = np.asarray(dq, dtype=np.float64)
    n, p = q.shape
    if r.shape != (p, p) or dq.shape != (n, p):
        raise ValueError(
            f"qr_backward shape mismatch: Q {q.shape}, R {r.shape}, dQ {dq.shape}"
        )
    diag = np.abs(np.diag(r))
    small = np.flatnonzero(diag <= QR_RANK_TOL)
    if small.size:
        raise RankDeficientError(
            int(small[0]), f"QR derivative ill-conditioned at column {int(small[0])}"
        )
    m = -(dq.T @ q)
    b = dq + q @ _copyltu(m)
    # dA = b R^{-T}  <=>  R dA^T = b^T
    return solve_triangular(r, b.T, lower=False).T


# --------------------------------------------------------------------------
# graph


class Node:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "id", "op", "parents", "shape", "attr", "name")

    def __init__(self, graph, nid, op, parents, shape, attr=None, name=None):
        self.graph = graph
        self.id = nid
        self.op = op
        self.parents = parents
        self.shape = shape
        self.attr = attr
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.id} {self.op}{label} {self.shape[0]}x{self.shape[1]}>"

    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.mul(self, other)
        return self.graph.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    @property
    def T(self):
        return self.graph.transpose(self)


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax_ce(z, y):
    return np.array([[-(y * _log_softmax(z)).sum() / z.shape[0]]])


class Graph:
    """A static computation graph over dense matrices.

    Nodes are appended in topological order.  ``values`` holds the result of
    the most recent evaluation, keyed by node id.
    """

    def __init__(self):
        self.nodes = []
        self.inputs = {}
        self.values = {}
        self.aux = {}
        self._schedules = {}
        self._grad_cache = {}
        self._consts = {}

    # -- construction -------------------------------------------------------

    def _add(self, op, parents, shape, attr=None, name=None):
        node = Node(self, len(self.nodes), op, tuple(p.id for p in parents), shape, attr, name)
        self.nodes.append(node)
        return node

    def _check(self, *nodes):
        for n in nodes:
            if not isinstance(n, Node) or n.graph is not self:
                raise GraphError(f"{n!r} is not a node of this graph")

    def input(self, name, shape):
        if name in self.inputs:
            raise GraphError(f"duplicate input name {name!r}")
        rows, cols = (int(s) for s in shape)
        if rows < 1 or cols < 1:
            raise ShapeError(len(self.nodes), f"input {name!r} needs positive shape, got {shape}")
        node = self._add("input", (), (rows, cols), name=name)
        self.inputs[name] = node
        return node

    def constant(self, value):
        value = as_matrix(value, "constant")
        value.setflags(write=False)
        return self._add("const", (), value.shape, attr=value)

    def filled(self, shape, fill):
        """Cached constant of the given shape filled with ``fill``."""
        key = (tuple(shape), float(fill))
        node = self._consts.get(key)
        if node is None:
            node = self.constant(np.full(shape, float(fill)))
            self._consts[key] = node
        return node

    def matmul(self, a, b):
        self._check(a, b)
        if a.shape[1] != b.shape[0]:
            raise ShapeError(len(self.nodes), f"matmul {a.shape} @ {b.shape}")
        return self._add("matmul", (a, b), (a.shape[0], b.shape[1]))

    def add(self, a, b):
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError(len(self.nodes), f"add {a.shape} + {b.shape}")
        return self._add("add", (a, b), a.shape)

    def sub(self, a, b):
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError(len(self.nodes), f"sub {a.shape} - {b.shape}")
        return self._add("sub", (a, b), a.shape)

    def scale(self, a, c):
        self._check(a)
        c = float(c)
        if not math.isfinite(c):
            raise GraphError("scale factor must be finite")
        return self._add("scale", (a,), a.shape, attr=c)

    def mul(self, a, b):
        """Elementwise product; either side may be a 1x1 scalar."""
        self._check(a, b)
        if a.shape == b.shape:
            shape = a.shape
        elif b.shape == (1, 1):
            shape = a.shape
        elif a.shape == (1, 1):
            shape = b.shape
        else:
            raise ShapeError(len(self.nodes), f"mul {a.shape} * {b.shape}")
        return self._add("mul", (a, b), shape)

    def transpose(self, a):
        self._check(a)
        return self._add("transpose", (a,), (a.shape[1], a.shape[0]))

    def tanh(self, a):
        self._check(a)
        return self._add("tanh", (a,), a.shape)

    def relu(self, a):
        self._check(a)
        return self._add("relu", (a,), a.shape)

    def exp(self, a):
        self._check(a)
        return self._add("exp", (a,), a.shape)

    def total(self, a):
        """Sum of all entries, as a 1x1 node."""
        self._check(a)
        return self._add("sum", (a,), (1, 1))

    def sumsq(self, a):
        """Squared Frobenius norm, as a 1x1 node."""
        self._check(a)
        return self._add("sumsq", (a,), (1, 1))

    def softmax(self, a):
        self._check(a)
        return self._add("softmax", (a,), a.shape)

    def log_softmax(self, a):
        self._check(a)
        return self._add("log_softmax", (a,), a.shape)

    def softmax_ce(self, logits, targets):
        """Mean softmax cross-entropy over rows; ``targets`` holds one-hot rows."""
        self._check(logits, targets)
        if logits.shape != targets.shape:
            raise ShapeError(len(self.nodes), f"softmax_ce {logits.shape} vs {targets.shape}")
        return self._add("softmax_ce", (logits, targets), (1, 1))

    def qr_q(self, a):
        """Orthonormal factor of the positive-diagonal thin QR of ``a``."""
        self._check(a)
        if a.shape[0] < a.shape[1]:
            raise ShapeError(len(self.nodes), f"thin QR needs rows >= cols, got {a.shape}")
        return self._add("qr", (a,), a.shape)

    def _relu_mask(self, a):
        return self._add("relu_mask", (a,), a.shape)

    def _qr_adjoint(self, qnode, g):
        return self._add("qr_adjoint", (qnode, g), qnode.shape)

    # -- differentiation ----------------------------------------------------

    def gradients(self, output, wrt):
        """Append nodes computing d(output)/d(w) for each ``w`` in ``wrt``.

        ``output`` must be 1x1.  Nodes in ``wrt`` may be any nodes, not only
        inputs.  Contributions are accumulated in a fixed order.
        """
        self._check(output, *wrt)
        if output.shape != (1, 1):
            raise GraphError(f"gradient output must be 1x1, got {output.shape}")
        key = (output.id, tuple(w.id for w in wrt))
        cached = self._grad_cache.get(key)
        if cached is not None:
            return list(cached)

        nodes = self.nodes
        ancestors = self._ancestors([output.id])
        wrt_ids = {w.id for w in wrt}
        lo = min(wrt_ids)
        relevant = set()
        for nid in range(lo, output.id + 1):
            if nid not in ancestors:
                continue
            if nid in wrt_ids or any(p in relevant for p in nodes[nid].parents):
                relevant.add(nid)

        adjoints = {output.id: [self.filled((1, 1), 1.0)]}
        found = {}
        for nid in range(output.id, lo - 1, -1):
            contribs = adjoints.pop(nid, None)
            if contribs is None or nid not in relevant:
                continue
            g = contribs[0]
            for c in contribs[1:]:
                g = self.add(g, c)
            if nid in wrt_ids:
                found[nid] = g
            node = nodes[nid]
            if not any(p in relevant for p in node.parents):
                continue
            rule = _GRAD_RULES.get(node.op)
            if rule is None:
                raise GraphError(f"op {node.op!r} (node {nid}) is not differentiable")
            for pid, pg in zip(node.parents, rule(self, node, g)):
                if pg is not None and pid in relevant:
                    adjoints.setdefault(pid, []).append(pg)

        result = [found.get(w.id) or self.filled(w.shape, 0.0) for w in wrt]
        self._grad_cache[key] = tuple(result)
        return result

    def _ancestors(self, ids):
        seen = set()
        stack = list(ids)
        nodes = self.nodes
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(nodes[nid].parents)
        return seen

    # -- evaluation ---------------------------------------------------------

    def _schedule(self, ids):
        key = tuple(sorted(set(ids)))
        sched = self._schedules.get(key)
        if sched is None:
            sched = sorted(self._ancestors(key))
            self._schedules[key] = sched
        return sched

    def _run(self, schedule, values, aux, bindings):
        # Inputs and constants are finite, so any NaN/Inf must come from an
        # op; floating-point traps catch it at the node that produced it.
        nodes = self.nodes
        nid = None
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise", under="ignore"):
                for nid in schedule:
                    if nid in values:
                        continue
                    node = nodes[nid]
                    op = node.op
                    if op == "input":
                        try:
                            v = bindings[node.name]
                        except KeyError:
                            raise GraphError(
                                f"input {node.name!r} (node {nid}) is not bound"
                            ) from None
                    elif op == "const":
                        v = node.attr
                    else:
                        v = _FORWARD[op](node, [values[p] for p in node.parents], aux)
                    values[nid] = v
        except FloatingPointError:
            raise NonFiniteError(nid, nodes[nid].op) from None

    def evaluate(self, inputs, outputs):
        """Evaluate ``outputs`` (a node or list of nodes) with fresh bindings."""
        single = isinstance(outputs, Node)
        outs = [outputs] if single else list(outputs)
        self._check(*outs)
        bindings = {}
        for name, value in inputs.items():
            node = self.inputs.get(name)
            if node is None:
                raise GraphError(f"unknown input {name!r}")
            arr = np.asarray(value, dtype=np.float64)
            if arr.ndim < 2:
                arr = arr.reshape(-1, 1)  # vectors are columns
            if arr.shape != node.shape:
                raise ShapeError(node.id, f"input {name!r} expects {node.shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise NonFiniteError(node.id, "input")
            bindings[name] = arr
        values = {}
        aux = {}
        self._run(self._schedule([o.id for o in outs]), values, aux, bindings)
        self.values = values
        self.aux = aux
        self._bindings = bindings
        if single:
            return values[outputs.id]
        return [values[o.id] for o in outs]

    def extend(self, outputs):
        """Evaluate more nodes on top of the most recent evaluation."""
        single = isinstance(outputs, Node)
        outs = [outputs] if single else list(outputs)
        self._check(*outs)
        if not self.values:
            raise GraphError("graph has not been evaluated")
        self._run(self._schedule([o.id for o in outs]), self.values, self.aux, self._bindings)
        if single:
            return self.values[outputs.id]
        return [self.values[o.id] for o in outs]


# --------------------------------------------------------------------------
# op tables


def _fwd_qr(node, vals, aux):
    q, r = qr_thin(vals[0])
    aux[node.id] = r
    return q


def _fwd_qr_adjoint(node, vals, aux):
    # LAPACK does not set numpy's floating-point flags
    out = qr_backward(vals[0], aux[node.parents[0]], vals[1])
    if not np.isfinite(out).all():
        raise FloatingPointError
    return out


_FORWARD = {
    "matmul": lambda n, v, a: v[0] @ v[1],
    "add": lambda n, v, a: v[0] + v[1],
    "sub": lambda n, v, a: v[0] - v[1],
    "scale": lambda n, v, a: n.attr * v[0],
    "mul": lambda n, v, a: v[0] * v[1],
    "transpose": lambda n, v, a: v[0].T,
    "tanh": lambda n, v, a: np.tanh(v[0]),
    "relu": lambda n, v, a: np.maximum(v[0], 0.0),
    "relu_mask": lambda n, v, a: (v[0] > 0.0).astype(np.float64),
    "exp": lambda n, v, a: np.exp(v[0]),
    "sum": lambda n, v, a: np.array([[v[0].sum()]]),
    "sumsq": lambda n, v, a: np.array([[np.vdot(v[0], v[0])]]),
    "softmax": lambda n, v, a: _softmax(v[0]),
    "log_softmax": lambda n, v, a: _log_softmax(v[0]),
    "softmax_ce": lambda n, v, a: _softmax_ce(v[0], v[1]),
    "qr": _fwd_qr,
    "qr_adjoint": _fwd_qr_adjoint,
}


def _node(g, nid):
    return g.nodes[nid]


def _reduce_to(g, grad, shape):
    # mul broadcasts a 1x1 operand; its adjoint is the total
    return g.total(grad) if shape == (1, 1) and grad.shape != (1, 1) else grad


def _rule_mul(g, node, gr):
    a, b = (_node(g, p) for p in node.parents)
    return [_reduce_to(g, g.mul(gr, b), a.shape), _reduce_to(g, g.mul(gr, a), b.shape)]


def _rule_tanh(g, node, gr):
    return [g.mul(gr, g.sub(g.filled(node.shape, 1.0), g.mul(node, node)))]


def _rule_softmax(g, node, gr):
    c = node.shape[1]
    inner = g.matmul(g.mul(gr, node), g.filled((c, c), 1.0))
    return [g.mul(node, g.sub(gr, inner))]


def _rule_log_softmax(g, node, gr):
    a = _node(g, node.parents[0])
    c = node.shape[1]
    rowsum = g.matmul(gr, g.filled((c, c), 1.0))
    return [g.sub(gr, g.mul(g.softmax(a), rowsum))]


def _rule_softmax_ce(g, node, gr):
    z, y = (_node(g, p) for p in node.parents)
    b, c = z.shape
    rows = g.matmul(y, g.filled((c, c), 1.0))
    dz = g.scale(g.sub(g.mul(g.softmax(z), rows), y), 1.0 / b)
    dy = g.scale(g.log_softmax(z), -1.0 / b)
    return [g.mul(dz, gr), g.mul(dy, gr)]


def _rule_qr_adjoint(g, node, gr):
    raise GraphError("differentiating the QR adjoint (third order) is not supported")


_GRAD_RULES = {
    "matmul": lambda g, n, gr: [
        g.matmul(gr, g.transpose(_node(g, n.parents[1]))),
        g.matmul(g.transpose(_node(g, n.parents[0])), gr),
    ],
    "add": lambda g, n, gr: [gr, gr],
    "sub": lambda g, n, gr: [gr, g.scale(gr, -1.0)],
    "scale": lambda g, n, gr: [g.scale(gr, n.attr)],
    "mul": _rule_mul,
    "transpose": lambda g, n, gr: [g.transpose(gr)],
    "tanh": _rule_tanh,
    "relu": lambda g, n, gr: [g.mul(gr, g._relu_mask(_node(g, n.parents[0])))],
    "relu_mask": lambda g, n, gr: [None],
    "exp": lambda g, n, gr: [g.mul(gr, n)],
    "sum": lambda g, n, gr: [g.mul(g.filled(_node(g, n.parents[0]).shape, 1.0), gr)],
    "sumsq": lambda g, n, gr: [g.scale(g.mul(_node(g, n.parents[0]), gr), 2.0)],
    "softmax": _rule_softmax,
    "log_softmax": _rule_log_softmax,
    "softmax_ce": _rule_softmax_ce,
    "qr": lambda g, n, gr: [g._qr_adjoint(n, gr)],
    "qr_adjoint": _rule_qr_adjoint,
}


# --------------------------------------------------------------------------
# functional entry points


def forward_eval(graph, inputs, output=None):
    """Evaluate ``output`` (default: the last node) and cache all values."""
    if output is None:
        if not graph.nodes:
            raise GraphError("empty graph")
        output = graph.nodes[-1]
    return graph.evaluate(inputs, output)


def backward_grads(graph, output, wrt=None):
    """Gradients of a 1x1 ``output`` w.r.t. named inputs, after :func:`forward_eval`.

    Returns ``{input name: gradient}``; ``wrt`` defaults to every input.
    """
    if output.shape != (1, 1):
        raise GraphError(f"backward needs a 1x1 output, got {output.shape}")
    if output.id not in graph.values:
        raise GraphError("call forward_eval on this output before backward_grads")
    names = list(graph.inputs) if wrt is None else list(wrt)
    nodes = [graph.inputs[n] for n in names]
    grads = graph.extend(graph.gradients(output, nodes))
    return dict(zip(names, grads))
