import numpy as np


def fd_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def cholesky_qr(a):
    """Independent QR oracle: R from the Cholesky factor of A^T A."""
    r = np.linalg.cholesky(a.T @ a).T
    q = np.linalg.solve(r.T, a.T).T
    return q, r


def sum_quadratic():
    """Objective ``sum_i 1/2 ||X_i - T_i||^2`` with targets keyed by parameter name."""
    from stiefel_maml.model import Objective

    class _SumQuadratic(Objective):
        def data_arrays(self, split):
            return {"target." + k: np.asarray(v, dtype=np.float64) for k, v in split.x.items()}

        def build_loss(self, g, params, data):
            terms = [g.sumsq(g.sub(params[k.split(".", 1)[1]], data[k])) for k in sorted(data)]
            total = terms[0]
            for t in terms[1:]:
                total = g.add(total, t)
            return g.scale(total, 0.5)

    return _SumQuadratic()
