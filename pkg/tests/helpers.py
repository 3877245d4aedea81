"""Independent oracles shared by the tests.

Nothing here calls the package's kernels: the reference forward pass is a
plain per-layer loop and gradients come from central differences.
"""
from __future__ import annotations

import numpy as np

SLOPE = 0.2


def ref_forward(widths, activations, values, x):
    """Per-layer ``act(x @ W + b)`` straight from the flat parameter layout."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    off = 0
    for i, act in enumerate(activations):
        n_in, n_out = widths[i], widths[i + 1]
        W = values[off:off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = values[off:off + n_out]
        off += n_out
        z = np.array([[sum(h[r, k] * W[k, j] for k in range(n_in)) + b[j] for j in range(n_out)]
                      for r in range(h.shape[0])])
        if act == "leaky_relu":
            h = np.where(z > 0, z, SLOPE * z)
        elif act == "tanh":
            h = np.tanh(z)
        else:
            h = z
    return h


def central_diff(f, x, h=1e-6):
    """Gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = x.copy()
        e.flat[i] += h
        fp = f(e)
        e.flat[i] -= 2 * h
        fm = f(e)
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def spearman(x, y) -> float:
    """Rank correlation via average ranks, without scipy."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            r[order[i:j + 1]] = 0.5 * (i + j)
            i = j + 1
        return r
    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)))
