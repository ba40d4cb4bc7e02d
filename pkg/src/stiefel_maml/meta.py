"""Inner-loop adaptation, meta updates and evaluation.

Methods:

``maml``      Euclidean inner and outer steps, second order by default.
``fomaml``    Euclidean, first order.
``smaml``     Riemannian steps on Stiefel-kind entries (tangent projection
              followed by QR retraction), first order by default; with
              ``order="second"`` the meta-gradient is taken through the
              unrolled inner loop, retractions included.
``fo-smaml``  Riemannian, first order.

Euclidean-kind entries (biases) always take plain gradient steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, RankDeficientError
from .kernel import KernelParams
from .stiefel import project_tangent, retract_qr

METHODS = ("maml", "fomaml", "smaml", "fo-smaml")
_DEFAULT_ORDER = {"maml": "second", "fomaml": "first", "smaml": "first", "fo-smaml": "first"}

TRAIN_STREAM = 0
EVAL_STREAM = 1
_STREAM_WIDTH = 2**32


class AdaptationError(ArithmeticError):
    def __init__(self, step, cause):
        super().__init__(f"inner step {step}: {cause}")
        self.step = step


class GraphBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 0.01
    beta: float = 0.001
    inner_steps: int = 5
    task_batch: int = 4
    method: str = "smaml"
    order: str | None = None
    seed: int = 0
    kernel: KernelParams = field(default_factory=KernelParams)
    graph_budget: int = 128  # max inner_steps * parameter entries, second order

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.inner_steps < 0:
            raise ValueError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if self.task_batch < 1:
            raise ValueError(f"task_batch must be >= 1, got {self.task_batch}")
        order = self.order or _DEFAULT_ORDER[self.method]
        if order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {order!r}")
        if order == "second" and self.method in ("fomaml", "fo-smaml"):
            raise ValueError(f"{self.method} is first order by definition")
        object.__setattr__(self, "order", order)

    @property
    def riemannian(self):
        return self.method in ("smaml", "fo-smaml")


@dataclass
class AdaptTrace:
    grad_norms: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def __len__(self):
        return len(self.grad_norms)


def task_seed(run_seed, stream, index):
    """Seed of the ``index``-th task of a stream; streams never overlap."""
    if run_seed < 0 or not 0 <= index < _STREAM_WIDTH:
        raise ValueError("seeds and task indices must be non-negative")
    return (int(run_seed) * 2 + int(stream)) * _STREAM_WIDTH + int(index)


def _anchor(params, cfg):
    return params if cfg.riemannian and cfg.kernel.enabled and params.stiefel_names() else None


def apply_step(params, grads, lr, riemannian):
    """One descent step of size ``lr``; returns ``(new params, step norm^2)``.

    Stiefel entries under a Riemannian method move along the projected
    gradient and are retracted; everything else takes a plain step.
    """
    updates = {}
    sq = 0.0
    for p in params:
        g = grads[p.name]
        if riemannian and p.is_stiefel:
            z = project_tangent(p.value, g)
            sq += float(np.vdot(z.value, z.value))
            updates[p.name] = retract_qr(z.base, z, -lr).value
        else:
            sq += float(np.vdot(g, g))
            updates[p.name] = p.value - lr * g
    return params.replace(updates, check=False), sq


def inner_adapt(objective, params, support, cfg):
    """``cfg.inner_steps`` descent steps on the support split."""
    anchor = _anchor(params, cfg)
    trace = AdaptTrace()
    current = params
    for k in range(cfg.inner_steps):
        loss, grads = objective.loss_and_grads(current, support, cfg.kernel, anchor)
        try:
            current, sq = apply_step(current, grads, cfg.alpha, cfg.riemannian)
        except RankDeficientError as exc:
            raise AdaptationError(k, exc) from exc
        trace.grad_norms.append(math.sqrt(sq))
        trace.losses.append(loss)
    return current, trace


# --------------------------------------------------------------------------
# second order


class _Unrolled:
    __slots__ = ("graph", "names", "query_loss", "meta_grads", "norms_sq", "losses")


def _build_unrolled(objective, params, sdata, qdata, cfg):
    g = Graph()
    names = params.names
    theta0 = {p.name: g.input(p.name, p.value.shape) for p in params}
    support = {k: g.input("support." + k, v.shape) for k, v in sdata.items()}
    query = {k: g.input("query." + k, v.shape) for k, v in qdata.items()}
    stiefel = {p.name for p in params if p.is_stiefel}
    anchors = {n: theta0[n] for n in stiefel} if _anchor(params, cfg) is not None else {}

    u = _Unrolled()
    u.graph, u.names, u.norms_sq, u.losses = g, names, [], []
    cur = dict(theta0)
    for _ in range(cfg.inner_steps):
        loss = objective.build_regularized(g, cur, support, anchors, cfg.kernel)
        grads = g.gradients(loss, [cur[n] for n in names])
        nxt = {}
        sq = None
        for name, gr in zip(names, grads):
            x = cur[name]
            if cfg.riemannian and name in stiefel:
                xtg = g.matmul(g.transpose(x), gr)
                sk = g.scale(g.sub(xtg, g.transpose(xtg)), 0.5)
                z = g.add(g.sub(gr, g.matmul(x, xtg)), g.matmul(x, sk))
                nxt[name] = g.qr_q(g.add(x, g.scale(z, -cfg.alpha)))
                term = g.sumsq(z)
            else:
                nxt[name] = g.sub(x, g.scale(gr, cfg.alpha))
                term = g.sumsq(gr)
            sq = term if sq is None else g.add(sq, term)
        u.norms_sq.append(sq)
        u.losses.append(loss)
        cur = nxt
    u.query_loss = objective.build_loss(g, cur, query)
    u.meta_grads = g.gradients(u.query_loss, [theta0[n] for n in names])
    return u


def _unrolled(objective, params, task, cfg):
    sdata = objective.data_arrays(task.support)
    qdata = objective.data_arrays(task.query)
    key = (
        "unrolled",
        params.signature(),
        tuple((k, v.shape) for k, v in sdata.items()),
        tuple((k, v.shape) for k, v in qdata.items()),
        cfg.alpha, cfg.inner_steps, cfg.riemannian, cfg.kernel,
    )
    u = objective._cache.get(key)
    if u is None:
        cost = cfg.inner_steps * len(params)
        if cost > cfg.graph_budget:
            raise GraphBudgetError(
                f"second-order unroll of {cfg.inner_steps} steps x {len(params)} "
                f"parameter entries exceeds graph budget {cfg.graph_budget}"
            )
        u = _build_unrolled(objective, params, sdata, qdata, cfg)
        objective._cache[key] = u
    feed = dict(params.values())
    feed.update({"support." + k: v for k, v in sdata.items()})
    feed.update({"query." + k: v for k, v in qdata.items()})
    return u, feed


def _second_order_task(objective, params, task, cfg):
    u, feed = _unrolled(objective, params, task, cfg)
    outs = u.graph.evaluate(feed, [u.query_loss] + u.meta_grads + u.norms_sq + u.losses)
    nparams = len(u.names)
    grads = dict(zip(u.names, outs[1:1 + nparams]))
    k = cfg.inner_steps
    trace = AdaptTrace(
        [math.sqrt(float(v[0, 0])) for v in outs[1 + nparams:1 + nparams + k]],
        [float(v[0, 0]) for v in outs[1 + nparams + k:]],
    )
    return float(outs[0][0, 0]), grads, trace


# --------------------------------------------------------------------------
# outer loop


@dataclass
class StepInfo:
    query_loss: float
    traces: list
    meta_grad_norm: float


def meta_gradient(objective, params, tasks, cfg):
    """Summed query-loss meta-gradient over ``tasks`` (Euclidean, at theta)."""
    if not tasks:
        raise ValueError("meta step needs at least one task")
    total = None
    losses, traces = [], []
    for task in tasks:
        if cfg.order == "second":
            try:
                qloss, grads, trace = _second_order_task(objective, params, task, cfg)
            except RankDeficientError as exc:
                raise AdaptationError(-1, exc) from exc
        else:
            adapted, trace = inner_adapt(objective, params, task.support, cfg)
            qloss, grads = objective.loss_and_grads(adapted, task.query)
        if total is None:
            total = {n: g.copy() for n, g in grads.items()}
        else:
            for n in total:
                total[n] += grads[n]
        losses.append(qloss)
        traces.append(trace)
    return total, losses, traces


def meta_step_info(objective, params, tasks, cfg):
    total, losses, traces = meta_gradient(objective, params, tasks, cfg)
    new_params, sq = apply_step(params, total, cfg.beta, cfg.riemannian)
    return new_params, StepInfo(float(np.mean(losses)), traces, math.sqrt(sq))


def meta_step(objective, params, tasks, cfg):
    """One outer update from the summed meta-gradient of ``tasks``."""
    return meta_step_info(objective, params, tasks, cfg)[0]


# --------------------------------------------------------------------------
# evaluation


def compute_ci95(values):
    """``1.96 * sample std / sqrt(n)``; ``None`` when fewer than two values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return None
    return float(1.96 * values.std(ddof=1) / math.sqrt(values.size))


@dataclass
class EvalReport:
    metric: str  # "accuracy" or "mse"
    mean: float
    ci95: float | None
    query_loss: float
    grad_norms: list  # mean over tasks, per inner step
    support_losses: list
    scores: list


def evaluate(objective, params, tasks, cfg):
    """Adapt a copy of ``params`` to every task and score its query split."""
    if not tasks:
        raise ValueError("evaluation needs at least one task")
    scores, qlosses, norms, slosses = [], [], [], []
    for task in tasks:
        adapted, trace = inner_adapt(objective, params, task.support, cfg)
        scores.append(objective.score(adapted, task.query))
        qlosses.append(objective.loss(adapted, task.query))
        norms.append(trace.grad_norms)
        slosses.append(trace.losses)
    metric = "mse" if tasks[0].is_regression else "accuracy"
    k = cfg.inner_steps
    return EvalReport(
        metric=metric,
        mean=float(np.mean(scores)),
        ci95=compute_ci95(scores),
        query_loss=float(np.mean(qlosses)),
        grad_norms=list(np.mean(norms, axis=0)) if k else [],
        support_losses=list(np.mean(slosses, axis=0)) if k else [],
        scores=scores,
    )


__all__ = [
    "METHODS", "MetaConfig", "AdaptTrace", "AdaptationError", "GraphBudgetError",
    "EvalReport", "StepInfo", "apply_step", "inner_adapt", "meta_gradient", "meta_step",
    "meta_step_info", "evaluate", "compute_ci95", "task_seed",
    "TRAIN_STREAM", "EVAL_STREAM",
]
