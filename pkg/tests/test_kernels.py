"""The compiled kernels and the numpy fallback must agree."""
from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from csprl import _kernels_py as py
from csprl import diffnet as dn

try:
    from csprl import _kernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled extension not built")


def _case(seed, m=3, B=9):
    rng = np.random.default_rng(seed)
    sig = dn.ArchSignature((4, 16, 8, 4), ("leaky_relu", "tanh", "identity"))
    anchors = rng.normal(size=(m, sig.n_params)) * 0.3
    alphas = rng.dirichlet(np.ones(m), size=B)
    x = rng.normal(size=(B, 4))
    dy = rng.normal(size=(B, 4))
    return sig.layout, anchors, alphas, x, dy


def test_backend_selected():
    from csprl import BACKEND
    assert BACKEND in ("python", "cython")


def test_pure_python_switch():
    code = "from csprl import BACKEND; print(BACKEND)"
    env = dict(os.environ, CSPRL_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_ext
@pytest.mark.parametrize("seed", range(4))
def test_mlp_parity(seed):
    layout, anchors, _, x, dy = _case(seed)
    yp, hp = py.mlp_forward(anchors[0], layout, x)
    yc, hc = cy.mlp_forward(anchors[0], layout, x)
    np.testing.assert_allclose(yc, yp, rtol=1e-12, atol=1e-13)
    gp, dxp = py.mlp_backward(anchors[0], layout, hp, dy, True, True)
    gc, dxc = cy.mlp_backward(anchors[0], layout, hc, dy, True, True)
    np.testing.assert_allclose(gc, gp, rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(dxc, dxp, rtol=1e-11, atol=1e-12)


@needs_ext
@pytest.mark.parametrize("seed", range(4))
def test_mix_parity(seed):
    layout, anchors, alphas, x, dy = _case(seed)
    yp, hp = py.mix_forward(anchors, alphas, layout, x)
    yc, hc = cy.mix_forward(anchors, alphas, layout, x)
    np.testing.assert_allclose(yc, yp, rtol=1e-11, atol=1e-12)
    for k in range(anchors.shape[0]):
        gp, dxp = py.mix_backward(anchors, alphas, layout, hp, dy, k, True)
        gc, dxc = cy.mix_backward(anchors, alphas, layout, hc, dy, k, True)
        np.testing.assert_allclose(gc, gp, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(dxc, dxp, rtol=1e-10, atol=1e-12)


def test_mix_forward_equals_combined_weights():
    layout, anchors, alphas, x, _ = _case(11)
    y, _ = py.mix_forward(anchors, alphas, layout, x)
    for b in range(x.shape[0]):
        theta = alphas[b] @ anchors
        yb, _ = py.mlp_forward(theta, layout, x[b:b + 1])
        np.testing.assert_allclose(y[b], yb[0], rtol=1e-11, atol=1e-12)


def test_mix_backward_matches_finite_differences():
    from helpers import central_diff, rel_err
    layout, anchors, alphas, x, dy = _case(2, m=2, B=3)
    k = 1

    def f(v):
        a = anchors.copy()
        a[k] = v
        return float(np.sum(dy * py.mix_forward(a, alphas, layout, x)[0]))
    _, hs = py.mix_forward(anchors, alphas, layout, x)
    g, _ = py.mix_backward(anchors, alphas, layout, hs, dy, k)
    assert rel_err(g, central_diff(f, anchors[k])) < 1e-6


@needs_ext
def test_pointmass_parity():
    rng = np.random.default_rng(0)
    pos, vel = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    act = np.clip(rng.normal(size=(5, 2)), -1, 1)
    mask = np.array([1.0, 0.0])
    args = (1.5, 0.7, 0.9, -1.0, mask, 0.05, 5.0, -0.5, 0.0, 0.5, 0.05)
    for a, b in zip(py.pointmass_step(pos, vel, act, *args), cy.pointmass_step(pos, vel, act, *args)):
        np.testing.assert_allclose(b, a, rtol=1e-14, atol=1e-15)
