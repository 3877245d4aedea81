"""Pure-numpy reference kernels.

Every function here has a twin with the same signature in the compiled
``_kernels`` extension. ``layout`` is an ``(L, 5)`` int64 array whose rows are
``(weight_offset, bias_offset, n_in, n_out, activation_code)``; weights are
stored row-major as ``(n_in, n_out)`` so a layer computes ``h @ W + b``.

The forward cache is the list ``[x, h_1, ..., h_L]`` of layer outputs.
Activation derivatives are recovered from the outputs alone.
"""
from __future__ import annotations

import numpy as np

IDENTITY = 0
LEAKY_RELU = 1
TANH = 2
LEAKY_SLOPE = 0.2

BACKEND = "python"


def _activate(z: np.ndarray, code: int) -> np.ndarray:
    if code == LEAKY_RELU:
        return np.maximum(z, LEAKY_SLOPE * z)
    if code == TANH:
        return np.tanh(z)
    return z


def _scale_by_derivative(d: np.ndarray, h: np.ndarray, code: int) -> np.ndarray:
    if code == LEAKY_RELU:
        return d * np.where(h > 0.0, 1.0, LEAKY_SLOPE)
    if code == TANH:
        return d * (1.0 - h * h)
    return d


def mlp_forward(params: np.ndarray, layout: np.ndarray, x: np.ndarray):
    hs = [x]
    h = x
    for w0, b0, n_in, n_out, code in layout:
        W = params[w0:w0 + n_in * n_out].reshape(n_in, n_out)
        h = _activate(h @ W + params[b0:b0 + n_out], code)
        hs.append(h)
    return h, hs


def mlp_backward(params, layout, hs, dy, need_dx=False, need_grad=True):
    grad = np.zeros_like(params) if need_grad else None
    d = dy
    n_layers = len(layout)
    dx = None
    for li in range(n_layers - 1, -1, -1):
        w0, b0, n_in, n_out, code = layout[li]
        d = _scale_by_derivative(d, hs[li + 1], code)
        if need_grad:
            grad[w0:w0 + n_in * n_out] = (hs[li].T @ d).ravel()
            grad[b0:b0 + n_out] = d.sum(axis=0)
        if li > 0 or need_dx:
            W = params[w0:w0 + n_in * n_out].reshape(n_in, n_out)
            d = d @ W.T
            if li == 0:
                dx = d
    return grad, dx


def mix_forward(anchors: np.ndarray, alphas: np.ndarray, layout: np.ndarray, x: np.ndarray):
    """Forward pass where sample ``b`` uses parameters ``sum_k alphas[b, k] * anchors[k]``.

    Each layer is evaluated per anchor and mixed, which equals evaluating the
    combined weights because every layer is affine before its activation.
    """
    m = anchors.shape[0]
    B = x.shape[0]
    hs = [x]
    h = x
    for w0, b0, n_in, n_out, code in layout:
        Wcat = anchors[:, w0:w0 + n_in * n_out].reshape(m, n_in, n_out).transpose(1, 0, 2).reshape(n_in, m * n_out)
        Z = (h @ Wcat).reshape(B, m, n_out)
        z = np.einsum("bko,bk->bo", Z, alphas) + alphas @ anchors[:, b0:b0 + n_out]
        h = _activate(z, code)
        hs.append(h)
    return h, hs


def mix_backward(anchors, alphas, layout, hs, dy, k, need_dx=False):
    """Gradient with respect to anchor ``k`` only, plus optional input gradient."""
    m = anchors.shape[0]
    B = dy.shape[0]
    grad = np.zeros(anchors.shape[1])
    ak = alphas[:, k:k + 1]
    d = dy
    dx = None
    n_layers = len(layout)
    for li in range(n_layers - 1, -1, -1):
        w0, b0, n_in, n_out, code = layout[li]
        d = _scale_by_derivative(d, hs[li + 1], code)
        dk = ak * d
        grad[w0:w0 + n_in * n_out] = (hs[li].T @ dk).ravel()
        grad[b0:b0 + n_out] = dk.sum(axis=0)
        if li > 0 or need_dx:
            Wcat = anchors[:, w0:w0 + n_in * n_out].reshape(m, n_in, n_out).transpose(1, 0, 2).reshape(n_in, m * n_out)
            dmix = (alphas[:, :, None] * d[:, None, :]).reshape(B, m * n_out)
            d = dmix @ Wcat.T
            if li == 0:
                dx = d
    return grad, dx


def pointmass_step(pos, vel, action, mass, gravity_mult, friction_mult, action_coeff, act_mask,
                   dt, gain, g0x, g0y, c0, ctrl_cost):
    """Batched point-mass update. Returns ``(pos', vel', reward)``; ``action`` must be clipped."""
    a_eff = action_coeff * (act_mask * action)
    acc = gain * a_eff / mass - friction_mult * c0 * vel
    acc[:, 0] += gravity_mult * g0x
    acc[:, 1] += gravity_mult * g0y
    new_vel = vel + dt * acc
    new_pos = pos + dt * new_vel
    reward = new_vel[:, 0] - ctrl_cost * np.sum(action * action, axis=1)
    return new_pos, new_vel, reward
