"""Gaussian kernel on St(n, p) and the loss ``1 - K(X, Y)``.

``K(X, Y) = exp(-lam * ||X - Y||_F^2)``.  The chordal (Frobenius) distance
comes from the embedding in R^{n x p}, so the kernel is positive definite and
its gradient is available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stiefel import StiefelPoint, TangentVector, chordal_distance, riemannian_grad


@dataclass(frozen=True)
class KernelParams:
    lam: float = 1.0  # bandwidth
    mu: float = 0.0  # weight when attached to a task loss; 0 disables it

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"kernel lambda must be > 0, got {self.lam}")
        if not (self.mu >= 0 and math.isfinite(self.mu)):
            raise ValueError(f"kernel mu must be >= 0, got {self.mu}")

    @property
    def enabled(self):
        return self.mu > 0


def kernel(x, y, params=KernelParams()):
    d = chordal_distance(x, y)
    return math.exp(-params.lam * d * d)


def kernel_loss(x, y, params=KernelParams()):
    return 1.0 - kernel(x, y, params)


def kernel_loss_grad(x, y, params=KernelParams()):
    """Riemannian gradient of ``kernel_loss`` in its first argument."""
    x = x if isinstance(x, StiefelPoint) else StiefelPoint(x)
    yv = y.value if isinstance(y, StiefelPoint) else np.asarray(y, dtype=np.float64)
    if yv.shape != x.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {yv.shape}")
    diff = x.value - yv
    k = math.exp(-params.lam * float(np.vdot(diff, diff)))
    egrad = 2.0 * params.lam * k * diff
    return TangentVector(x, riemannian_grad(x.value, egrad))


def gram_matrix(points, params=KernelParams()):
    m = len(points)
    out = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            out[i, j] = out[j, i] = kernel(points[i], points[j], params)
    return out


def kernel_loss_node(graph, x, y, lam):
    """Graph version of ``1 - exp(-lam ||x - y||^2)`` for 1x1 output."""
    d2 = graph.sumsq(graph.sub(x, y))
    return graph.sub(graph.filled((1, 1), 1.0), graph.exp(graph.scale(d2, -lam)))
