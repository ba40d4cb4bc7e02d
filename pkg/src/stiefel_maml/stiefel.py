"""Geometry of the Stiefel manifold St(n, p) = {X : X^T X = I_p}.

Tangent vectors, inner products and norms use the metric inherited from the
ambient Frobenius inner product.  Under that metric the tangent projection
below is exactly the Riemannian gradient of a function whose Euclidean
gradient is ``G``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import as_matrix, qr_thin

POINT_TOL = 1e-8
TANGENT_TOL = 1e-8


class ManifoldError(ValueError):
    pass


def orthonormality_error(x):
    """``||X^T X - I||_F``."""
    x = np.asarray(x)
    m = x.T @ x
    m.flat[:: m.shape[0] + 1] -= 1.0
    return math.sqrt(float(np.vdot(m, m)))


def tangency_error(x, z):
    """``||X^T Z + Z^T X||_F``."""
    m = np.asarray(x).T @ np.asarray(z)
    m += m.T.copy()
    return math.sqrt(float(np.vdot(m, m)))


@dataclass(frozen=True, eq=False)
class StiefelPoint:
    """An ``n x p`` matrix with orthonormal columns."""

    value: np.ndarray

    def __post_init__(self):
        v = as_matrix(self.value, "StiefelPoint")
        n, p = v.shape
        if p > n:
            raise ManifoldError(f"St(n, p) needs p <= n, got {n}x{p}")
        err = orthonormality_error(v)
        if err > POINT_TOL:
            raise ManifoldError(f"||X^T X - I||_F = {err:.3e} exceeds {POINT_TOL:g}")
        v.setflags(write=False)
        object.__setattr__(self, "value", v)

    @property
    def n(self):
        return self.value.shape[0]

    @property
    def p(self):
        return self.value.shape[1]

    @property
    def shape(self):
        return self.value.shape


@dataclass(frozen=True, eq=False)
class TangentVector:
    """A matrix ``Z`` with ``X^T Z + Z^T X = 0`` at base point ``X``."""

    base: StiefelPoint
    value: np.ndarray

    def __post_init__(self):
        v = as_matrix(self.value, "TangentVector")
        if v.shape != self.base.shape:
            raise ManifoldError(f"tangent shape {v.shape} != base shape {self.base.shape}")
        err = tangency_error(self.base.value, v)
        if err > TANGENT_TOL * max(1.0, float(np.linalg.norm(v))):
            raise ManifoldError(f"||X^T Z + Z^T X||_F = {err:.3e} exceeds tolerance")
        v.setflags(write=False)
        object.__setattr__(self, "value", v)

    @property
    def norm(self):
        return float(np.linalg.norm(self.value))


def _point(x):
    return x if isinstance(x, StiefelPoint) else StiefelPoint(x)


def skew(a):
    """Skew-symmetric part ``(A - A^T) / 2``."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"skew needs a square matrix, got shape {a.shape}")
    return 0.5 * (a - a.T)


def sym(a):
    """Symmetric part ``(A + A^T) / 2``."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym needs a square matrix, got shape {a.shape}")
    return 0.5 * (a + a.T)


def riemannian_grad(x, g):
    """``(I - X X^T) G + X skew(X^T G)`` on raw arrays."""
    xtg = x.T @ g
    return g - x @ xtg + x @ skew(xtg)


def project_tangent(x, g):
    """Project a Euclidean gradient ``G`` onto the tangent space at ``X``."""
    x = _point(x)
    g = as_matrix(g, "G")
    if g.shape != x.shape:
        raise ValueError(f"gradient shape {g.shape} does not match point shape {x.shape}")
    return TangentVector(x, riemannian_grad(x.value, g))


def retract_qr(x, z, t=1.0):
    """QR retraction: the orthonormal factor of ``X + t Z``."""
    x = _point(x)
    zv = z.value if isinstance(z, TangentVector) else as_matrix(z, "Z")
    if isinstance(z, TangentVector) and z.base is not x:
        if not np.array_equal(z.base.value, x.value):
            raise ManifoldError("tangent vector is based at a different point")
    if zv.shape != x.shape:
        raise ValueError(f"tangent shape {zv.shape} does not match point shape {x.shape}")
    q, _ = qr_thin(x.value + float(t) * zv)
    return StiefelPoint(q)


def random_point(n, p, seed):
    """Q factor of a seeded standard Gaussian ``n x p`` matrix."""
    n, p = int(n), int(p)
    if p < 1 or n < 1:
        raise ValueError(f"St(n, p) needs n, p >= 1, got ({n}, {p})")
    if p > n:
        raise ValueError(f"St(n, p) needs p <= n, got ({n}, {p})")
    rng = np.random.default_rng(seed)
    q, _ = qr_thin(rng.standard_normal((n, p)))
    return StiefelPoint(q)


def random_tangent(x, seed):
    """Unit-norm tangent vector at ``X`` from a projected Gaussian draw."""
    x = _point(x)
    n, p = x.shape
    if n * p - p * (p + 1) // 2 == 0:
        raise ManifoldError(f"St({n}, {p}) has a zero-dimensional tangent space")
    seed = int(seed)
    while True:
        g = np.random.default_rng(seed).standard_normal(x.shape)
        z = riemannian_grad(x.value, g)
        # second pass removes rounding left by the first projection
        z = riemannian_grad(x.value, z)
        norm = float(np.linalg.norm(z))
        if norm > 1e-12:
            return TangentVector(x, z / norm)
        seed += 1


def chordal_distance(x, y):
    """Frobenius distance ``||X - Y||_F`` between two points of St(n, p).

    Used as a closed-form surrogate for the geodesic distance.
    """
    xv = x.value if isinstance(x, StiefelPoint) else np.asarray(x, dtype=np.float64)
    yv = y.value if isinstance(y, StiefelPoint) else np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape:
        raise ValueError(f"dimension mismatch: {xv.shape} vs {yv.shape}")
    return float(np.linalg.norm(xv - yv))
