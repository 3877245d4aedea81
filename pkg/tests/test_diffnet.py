from __future__ import annotations

import numpy as np
import pytest

from csprl import diffnet as dn
from csprl.errors import InputError, TrainingFault
from helpers import central_diff, ref_forward, rel_err


def _net(rng, widths=(3, 5, 4, 2), acts=("tanh", "leaky_relu", "identity")):
    sig = dn.ArchSignature(widths, acts)
    return dn.init_params(sig, rng)


def test_signature_counts_and_layout():
    sig = dn.ArchSignature.mlp(4, (64, 64), 4)
    assert sig.n_params == 4 * 64 + 64 + 64 * 64 + 64 + 64 * 4 + 4
    assert sig.activations == ("leaky_relu", "leaky_relu", "identity")
    last = sig.layout[-1]
    assert last[1] + last[3] == sig.n_params


@pytest.mark.parametrize("widths,acts", [((3,), ()), ((3, 0), ("identity",)), ((3, 2), ("relu",)),
                                         ((3, 2), ())])
def test_signature_rejects(widths, acts):
    with pytest.raises(InputError):
        dn.ArchSignature(widths, acts)


def test_param_vector_length_checked():
    sig = dn.ArchSignature((2, 1), ("identity",))
    with pytest.raises(InputError):
        dn.ParamVector(sig, np.zeros(4))


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(0)
    p = _net(rng)
    x = rng.normal(size=(6, 3))
    out = dn.forward(p, x)
    ref = ref_forward(p.signature.widths, p.signature.activations, p.values, x)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(dn.forward(p, x[0]), ref[0], rtol=1e-12, atol=1e-12)


def test_zero_params_give_zero_output():
    sig = dn.ArchSignature.mlp(3, (8,), 2)
    assert np.all(dn.forward(dn.ParamVector.zeros(sig), np.ones((4, 3))) == 0.0)


def test_forward_rejects_wrong_width():
    p = _net(np.random.default_rng(1))
    with pytest.raises(InputError):
        dn.forward(p, np.ones(4))


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = _net(rng)
    x = rng.normal(size=(4, 3))
    ct = rng.normal(size=(4, 2))
    g = dn.backward(p, x, ct)
    fd = central_diff(lambda v: float(np.sum(ct * dn.forward(dn.ParamVector(p.signature, v), x))), p.values)
    assert rel_err(g, fd) < 1e-6


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    p = _net(rng)
    x = rng.normal(size=3)
    ct = rng.normal(size=2)
    g = dn.input_gradient(p, x, ct)
    fd = central_diff(lambda z: float(ct @ dn.forward(p, z)), x)
    assert rel_err(g, fd) < 1e-6


def test_squared_sample_gradients_match_per_sample_loop():
    rng = np.random.default_rng(3)
    p = _net(rng)
    x = rng.normal(size=(7, 3))
    ct = rng.normal(size=(7, 2))
    want = sum(dn.backward(p, x[b], ct[b]) ** 2 for b in range(7))
    np.testing.assert_allclose(dn.squared_sample_gradients(p, x, ct), want, rtol=1e-10, atol=1e-14)


def test_adam_matches_textbook_update():
    rng = np.random.default_rng(0)
    params = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(3)]
    st = dn.AdamState.create(5, 1e-2)
    p = params.copy()
    for g in grads:
        dn.adam_step(st, p, g)
    # reference written out from the update equations
    m = np.zeros(5)
    v = np.zeros(5)
    q = params.copy()
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        q = q - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, q, rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    st = dn.AdamState.create(2, 1e-3)
    with pytest.raises(TrainingFault):
        dn.adam_step(st, np.zeros(2), np.array([1.0, np.nan]))


def test_init_is_seeded_and_bounded():
    sig = dn.ArchSignature.mlp(4, (64,), 2)
    a = dn.init_params(sig, np.random.default_rng(5))
    b = dn.init_params(sig, np.random.default_rng(5))
    assert np.array_equal(a.values, b.values)
    assert np.max(np.abs(a.values[:4 * 64])) <= 0.5
