"""Parameter sets, the MLP learner and graph-compiled objectives."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Graph, as_matrix
from .kernel import KernelParams, kernel_loss_node
from .stiefel import POINT_TOL, orthonormality_error, random_point

EUCLIDEAN = "euclidean"
STIEFEL = "stiefel"
AS_STORED = "as-stored"
TRANSPOSED = "transposed"

CHECKPOINT_FORMAT = "stiefel-maml-params"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Param:
    name: str
    value: np.ndarray
    kind: str = EUCLIDEAN
    orientation: str = AS_STORED

    def __post_init__(self):
        if self.kind not in (EUCLIDEAN, STIEFEL):
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.orientation not in (AS_STORED, TRANSPOSED):
            raise ValueError(f"{self.name}: unknown orientation {self.orientation!r}")
        v = np.array(self.value, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"{self.name}: parameters are matrices")
        v.setflags(write=False)
        object.__setattr__(self, "value", v)

    @property
    def is_stiefel(self):
        return self.kind == STIEFEL

    def with_value(self, value):
        return Param(self.name, value, self.kind, self.orientation)


class ParamSet:
    """Ordered, immutable collection of named parameters.

    Stiefel-kind entries are checked for orthonormality in their stored
    (tall) orientation.
    """

    def __init__(self, params, check=True):
        params = tuple(params)
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        if check:
            for p in params:
                if p.is_stiefel:
                    n, k = p.value.shape
                    if k > n:
                        raise ValueError(f"{p.name}: Stiefel entries are stored tall, got {n}x{k}")
                    err = orthonormality_error(p.value)
                    if err > POINT_TOL:
                        raise ValueError(f"{p.name}: ||X^T X - I||_F = {err:.3e}")
        self._params = params
        self._index = {p.name: i for i, p in enumerate(params)}

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name):
        return self._params[self._index[name]]

    def __contains__(self, name):
        return name in self._index

    @property
    def names(self):
        return [p.name for p in self._params]

    def values(self):
        return {p.name: p.value for p in self._params}

    def stiefel_names(self):
        return [p.name for p in self._params if p.is_stiefel]

    def replace(self, updates, check=True):
        """New ParamSet with some values swapped; kinds and order are kept."""
        unknown = set(updates) - set(self._index)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        return ParamSet(
            (p.with_value(updates[p.name]) if p.name in updates else p for p in self._params),
            check=check,
        )

    def signature(self):
        return tuple((p.name, p.value.shape, p.kind, p.orientation) for p in self._params)

    def equals(self, other):
        """Bitwise equality of names, kinds, orientations and values."""
        return self.signature() == other.signature() and all(
            np.array_equal(a.value, b.value) for a, b in zip(self, other)
        )


# --------------------------------------------------------------------------
# checkpoints


def save_params(params, path):
    """Write a versioned JSON checkpoint.  Floats round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "entries": [
            {
                "name": p.name,
                "shape": list(p.value.shape),
                "kind": p.kind,
                "orientation": p.orientation,
                "values": [float(v) for v in p.value.ravel(order="C")],
            }
            for p in params
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_params(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    entries = []
    for e in doc["entries"]:
        value = np.array(e["values"], dtype=np.float64).reshape(e["shape"])
        entries.append(Param(e["name"], value, e["kind"], e["orientation"]))
    return ParamSet(entries)


# --------------------------------------------------------------------------
# objectives


class _Compiled:
    __slots__ = ("graph", "params", "data", "anchors", "loss", "grads", "output")


class Objective:
    """A loss over a ParamSet and a data split, expressed as a graph.

    Subclasses implement :meth:`data_arrays` and :meth:`build_loss`.  Graphs
    are compiled once per combination of parameter and data shapes and then
    re-evaluated.
    """

    def __init__(self):
        self._cache = {}

    def data_arrays(self, split):
        raise NotImplementedError

    def build_loss(self, graph, params, data):
        raise NotImplementedError

    def build_output(self, graph, params, data):
        raise NotImplementedError(f"{type(self).__name__} has no prediction output")

    def build_regularized(self, graph, params, data, anchors, kernel):
        loss = self.build_loss(graph, params, data)
        if anchors:
            reg = None
            for name, anchor in anchors.items():
                term = kernel_loss_node(graph, params[name], anchor, kernel.lam)
                reg = term if reg is None else graph.add(reg, term)
            loss = graph.add(loss, graph.scale(reg, kernel.mu))
        return loss

    def compile(self, params, split, kernel=None, anchored=()):
        data = self.data_arrays(split)
        anchored = tuple(anchored) if kernel is not None and kernel.enabled else ()
        key = (
            "loss",
            params.signature(),
            tuple((k, v.shape) for k, v in data.items()),
            (kernel.lam, kernel.mu) if anchored else None,
            anchored,
        )
        c = self._cache.get(key)
        if c is None:
            c = _Compiled()
            g = c.graph = Graph()
            c.params = {p.name: g.input(p.name, p.value.shape) for p in params}
            c.data = {k: g.input(k, v.shape) for k, v in data.items()}
            c.anchors = {n: g.input("anchor:" + n, params[n].value.shape) for n in anchored}
            c.loss = self.build_regularized(g, c.params, c.data, c.anchors, kernel)
            c.grads = g.gradients(c.loss, list(c.params.values()))
            self._cache[key] = c
        return c, data

    def _bind(self, c, params, data, anchor):
        feed = dict(params.values())
        feed.update(data)
        for n in c.anchors:
            feed["anchor:" + n] = anchor[n].value
        return feed

    def loss(self, params, split, kernel=None, anchor=None):
        anchored = anchor.stiefel_names() if anchor is not None else ()
        c, data = self.compile(params, split, kernel, anchored)
        return float(c.graph.evaluate(self._bind(c, params, data, anchor), c.loss)[0, 0])

    def loss_and_grads(self, params, split, kernel=None, anchor=None):
        """``(loss, {name: Euclidean gradient})`` in stored orientation."""
        anchored = anchor.stiefel_names() if anchor is not None else ()
        c, data = self.compile(params, split, kernel, anchored)
        out = c.graph.evaluate(self._bind(c, params, data, anchor), [c.loss] + c.grads)
        return float(out[0][0, 0]), dict(zip(c.params, out[1:]))

    def predict(self, params, x):
        data = {"x": as_matrix(x, "inputs")}
        key = ("output", params.signature(), data["x"].shape)
        c = self._cache.get(key)
        if c is None:
            c = _Compiled()
            g = c.graph = Graph()
            c.params = {p.name: g.input(p.name, p.value.shape) for p in params}
            c.data = {"x": g.input("x", data["x"].shape)}
            c.output = self.build_output(g, c.params, c.data)
            self._cache[key] = c
        feed = dict(params.values())
        feed.update(data)
        return c.graph.evaluate(feed, c.output)


# --------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "tanh"
    head: str = "softmax-cross-entropy"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("at least one hidden layer is required")
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise ValueError("all layer sizes must be >= 1")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in ("softmax-cross-entropy", "mean-squared-error"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def layer_dims(self):
        dims = (self.input_dim,) + self.hidden_dims + (self.output_dim,)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def classification(self):
        return self.head == "softmax-cross-entropy"


def weight_name(i):
    return f"layer{i}.weight"


def bias_name(i):
    return f"layer{i}.bias"


def init_params(config, seed, stiefel=True):
    """Orthonormal weights in tall orientation and zero biases.

    With ``stiefel=False`` the same values are produced but every entry is
    tagged Euclidean.
    """
    entries = []
    for i, (fan_in, fan_out) in enumerate(config.layer_dims):
        n, p = max(fan_in, fan_out), min(fan_in, fan_out)
        orientation = AS_STORED if fan_out >= fan_in else TRANSPOSED
        w = random_point(n, p, np.random.SeedSequence([int(seed), i])).value
        entries.append(Param(weight_name(i), w, STIEFEL if stiefel else EUCLIDEAN, orientation))
        entries.append(Param(bias_name(i), np.zeros((1, fan_out))))
    return ParamSet(entries)


def dense_weight(param):
    """The ``(out, in)`` weight matrix represented by a stored entry."""
    return param.value if param.orientation == AS_STORED else param.value.T


class MLP(Objective):
    """Fully connected network; weights multiply row-major batches."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self._orient = {
            weight_name(i): AS_STORED if fo >= fi else TRANSPOSED
            for i, (fi, fo) in enumerate(config.layer_dims)
        }

    def init_params(self, seed, stiefel=True):
        return init_params(self.config, seed, stiefel=stiefel)

    def targets(self, y):
        y = np.asarray(y)
        rows = y.shape[0]
        if self.config.classification:
            labels = y.astype(np.int64).ravel()
            if not np.array_equal(labels, y.ravel()):
                raise ValueError("classification labels must be integers")
            if labels.size and (labels.min() < 0 or labels.max() >= self.config.output_dim):
                raise ValueError(f"label out of range [0, {self.config.output_dim})")
            onehot = np.zeros((rows, self.config.output_dim))
            onehot[np.arange(rows), labels] = 1.0
            return onehot
        return as_matrix(y, "targets").reshape(rows, self.config.output_dim)

    def data_arrays(self, split):
        if len(split) == 0:
            raise ValueError("empty batch")
        return {"x": as_matrix(split.x, "inputs"), "y": self.targets(split.y)}

    def build_output(self, graph, params, data):
        h = data["x"]
        rows = h.shape[0]
        ones = graph.filled((rows, 1), 1.0)
        layers = self.config.layer_dims
        for i in range(len(layers)):
            w = params[weight_name(i)]
            w = graph.transpose(w) if self._orient[weight_name(i)] == AS_STORED else w
            h = graph.add(graph.matmul(h, w), graph.matmul(ones, params[bias_name(i)]))
            if i < len(layers) - 1:
                h = graph.tanh(h) if self.config.activation == "tanh" else graph.relu(h)
        return h

    def build_loss(self, graph, params, data):
        out = self.build_output(graph, params, data)
        if self.config.classification:
            return graph.softmax_ce(out, data["y"])
        rows, cols = out.shape
        return graph.scale(graph.sumsq(graph.sub(out, data["y"])), 1.0 / (rows * cols))

    def forward(self, params, x):
        return self.predict(params, x)

    def task_loss(self, params, split, kernel=None, anchor=None):
        return self.loss(params, split, kernel, anchor)

    def euclidean_grads(self, params, split, kernel=None, anchor=None):
        return self.loss_and_grads(params, split, kernel, anchor)[1]

    def score(self, params, split):
        """Accuracy for classification, mean squared error for regression."""
        out = self.predict(params, split.x)
        if self.config.classification:
            return float(np.mean(np.argmax(out, axis=1) == np.asarray(split.y).ravel()))
        y = np.asarray(split.y, dtype=np.float64).reshape(out.shape)
        return float(np.mean((out - y) ** 2))
