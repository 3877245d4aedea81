"""Flat-vector multilayer perceptrons with hand-written reverse mode and Adam.

Networks are described by an :class:`ArchSignature` and their weights live in
a single float64 vector (:class:`ParamVector`). Layer ``i`` stores its weight
matrix ``(w_i, w_{i+1})`` row-major followed by its bias.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ._backend import kernels
from .errors import InputError, TrainingFault

ACTIVATIONS = {"identity": 0, "leaky_relu": 1, "tanh": 2}
ACTIVATION_NAMES = {v: k for k, v in ACTIVATIONS.items()}


@dataclass(frozen=True)
class ArchSignature:
    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2:
            raise InputError("an architecture needs at least two widths")
        if any(w <= 0 for w in self.widths):
            raise InputError(f"widths must be positive, got {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise InputError("need one activation per layer boundary")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise InputError(f"unknown activation {a!r}")

    @classmethod
    def mlp(cls, n_in: int, hidden: tuple[int, ...], n_out: int) -> "ArchSignature":
        """Leaky-ReLU hidden layers and a linear head."""
        widths = (n_in, *hidden, n_out)
        acts = ("leaky_relu",) * len(hidden) + ("identity",)
        return cls(widths, acts)

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @cached_property
    def layout(self) -> np.ndarray:
        rows = []
        off = 0
        for i in range(len(self.widths) - 1):
            n_in, n_out = self.widths[i], self.widths[i + 1]
            rows.append((off, off + n_in * n_out, n_in, n_out, ACTIVATIONS[self.activations[i]]))
            off += n_in * n_out + n_out
        return np.array(rows, dtype=np.int64)


@dataclass
class ParamVector:
    signature: ArchSignature
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (self.signature.n_params,):
            raise InputError(
                f"expected {self.signature.n_params} parameters, got shape {self.values.shape}"
            )

    def copy(self) -> "ParamVector":
        return ParamVector(self.signature, self.values.copy())

    @classmethod
    def zeros(cls, signature: ArchSignature) -> "ParamVector":
        return cls(signature, np.zeros(signature.n_params))


def init_params(signature: ArchSignature, rng: np.random.Generator) -> ParamVector:
    """Uniform(+-1/sqrt(fan_in)) weights and biases, layer by layer."""
    values = np.empty(signature.n_params)
    for w0, b0, n_in, n_out, _ in signature.layout:
        bound = 1.0 / np.sqrt(n_in)
        values[w0:b0] = rng.uniform(-bound, bound, size=n_in * n_out)
        values[b0:b0 + n_out] = rng.uniform(-bound, bound, size=n_out)
    return ParamVector(signature, values)


def _as_batch(signature: ArchSignature, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != signature.n_in:
        raise InputError(f"input width {x.shape} does not match {signature.n_in}")
    return np.ascontiguousarray(xb), single


def forward(params: ParamVector, x) -> np.ndarray:
    """Evaluate the network on one input vector or a ``(batch, n_in)`` array."""
    xb, single = _as_batch(params.signature, x)
    y, _ = kernels.mlp_forward(params.values, params.signature.layout, xb)
    return y[0] if single else y


def backward(params: ParamVector, x, cotangent) -> np.ndarray:
    """Gradient of ``<cotangent, forward(params, x)>`` with respect to the parameters.

    For a batch input the per-sample gradients are summed.
    """
    sig = params.signature
    xb, single = _as_batch(sig, x)
    ct = np.asarray(cotangent, dtype=np.float64)
    ct = ct[None, :] if single else ct
    if ct.shape != (xb.shape[0], sig.n_out):
        raise InputError(f"cotangent shape {ct.shape} does not match output width {sig.n_out}")
    _, hs = kernels.mlp_forward(params.values, sig.layout, xb)
    grad, _ = kernels.mlp_backward(params.values, sig.layout, hs, np.ascontiguousarray(ct))
    return grad


def input_gradient(params: ParamVector, x, cotangent) -> np.ndarray:
    """Gradient of ``<cotangent, forward(params, x)>`` with respect to ``x``."""
    sig = params.signature
    xb, single = _as_batch(sig, x)
    ct = np.asarray(cotangent, dtype=np.float64)
    ct = np.ascontiguousarray(ct[None, :] if single else ct)
    _, hs = kernels.mlp_forward(params.values, sig.layout, xb)
    _, dx = kernels.mlp_backward(params.values, sig.layout, hs, ct, True, False)
    return dx[0] if single else dx


def squared_sample_gradients(params: ParamVector, x: np.ndarray, cotangents: np.ndarray) -> np.ndarray:
    """Sum over samples of the elementwise-squared per-sample parameter gradients.

    Uses ``sum_b (h_bi * d_bj)^2 = sum_b h_bi^2 d_bj^2`` so no per-sample
    gradient matrix is materialised.
    """
    sig = params.signature
    xb, _ = _as_batch(sig, x)
    _, hs = kernels.mlp_forward(params.values, sig.layout, xb)
    out = np.zeros(sig.n_params)
    d = np.asarray(cotangents, dtype=np.float64)
    for li in range(len(sig.layout) - 1, -1, -1):
        w0, b0, n_in, n_out, code = sig.layout[li]
        h_out = hs[li + 1]
        if code == 1:
            d = np.where(h_out > 0.0, d, 0.2 * d)
        elif code == 2:
            d = d * (1.0 - h_out * h_out)
        out[w0:b0] = ((hs[li] ** 2).T @ (d ** 2)).ravel()
        out[b0:b0 + n_out] = (d ** 2).sum(axis=0)
        if li > 0:
            d = d @ params.values[w0:b0].reshape(n_in, n_out).T
    return out


@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n: int, lr: float) -> "AdamState":
        return cls(lr=lr, m=np.zeros(n), v=np.zeros(n))

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.m.copy(), self.v.copy(), self.step, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params, grad: np.ndarray) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if isinstance(params, ParamVector):
        params = params.values
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise InputError("parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(grad)):
        raise TrainingFault("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * (grad * grad)
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
