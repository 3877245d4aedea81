from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csprl import diffnet as dn, envs, sac, subspace as sp
from csprl.errors import CapacityError, InputError

SIG2 = dn.ArchSignature((1, 2), ("identity",))  # 4 parameters


def _sub(rows, sig=None):
    rows = np.asarray(rows, dtype=np.float64)
    sig = sig or dn.ArchSignature((1, rows.shape[1] - 1), ("identity",))
    return sp.Subspace(sig, rows)


def _buffer(rng, n=50):
    buf = sac.ReplayBuffer(n)
    buf.add_batch(rng.normal(size=(n, 4)), rng.uniform(-1, 1, (n, 2)), rng.normal(size=n),
                  rng.normal(size=(n, 4)), np.zeros(n), np.ones((n, 1)))
    return buf


def _linear_critic(c, alpha_max=16):
    """A critic whose output is exactly ``c . alpha`` (weights only on the alpha inputs)."""
    sig = dn.ArchSignature((6 + alpha_max, 1), ("identity",))
    v = np.zeros(sig.n_params)
    v[6:6 + len(c)] = c
    return dn.ParamVector(sig, v)


# -- combine ------------------------------------------------------------------

def test_combine_hand_values():
    sub = _sub([[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_array_equal(sp.combine(sub, [0.25, 0.75]).values, [0.25, 1.5])


def test_combine_vertex_and_mean():
    rng = np.random.default_rng(0)
    sub = sp.Subspace(SIG2, rng.normal(size=(3, 4)))
    for i in range(3):
        assert np.array_equal(sp.combine(sub, sp.vertex(3, i)).values, sub.anchors[i])
    # thirds are not exact, so compare with the same left-to-right order
    u = np.full(3, 1 / 3)
    want = (u[0] * sub.anchors[0] + u[1] * sub.anchors[1]) + u[2] * sub.anchors[2]
    assert np.array_equal(sp.combine(sub, u).values, want)
    np.testing.assert_allclose(sp.combine(sub, u).values, sub.anchors.mean(axis=0), rtol=1e-14)


def test_combine_rejects_bad_alpha():
    sub = _sub([[1.0, 0.0], [0.0, 2.0]])
    for bad in ([1.0], [0.5, 0.4], [1.5, -0.5], [np.nan, 1.0]):
        with pytest.raises(InputError):
            sp.combine(sub, bad)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31), st.integers(1, 4))
def test_zero_pad_equivalence(m, seed, extra):
    rng = np.random.default_rng(seed)
    anchors = rng.normal(size=(m + extra, 4))
    a = rng.dirichlet(np.ones(m)) if m > 1 else np.ones(1)
    small = sp.Subspace(SIG2, anchors[:m])
    big = sp.Subspace(SIG2, anchors)
    assert np.array_equal(sp.combine(small, a).values, sp.combine(big, sp.pad(a, m + extra)).values)


# -- sampling -----------------------------------------------------------------

def test_sample_alpha_single():
    rng = np.random.default_rng(0)
    for mode in sp.MODES:
        assert np.array_equal(sp.sample_alpha(1, 1, mode, rng), [1.0])
    with pytest.raises(InputError):
        sp.sample_alpha(3, 2, "flat", rng)
    with pytest.raises(InputError):
        sp.sample_alpha(1, 2, "spiky", rng)


def test_flat_dirichlet_moments():
    rng = np.random.default_rng(0)
    draws = np.array([sp.sample_alpha(3, 3, "flat", rng) for _ in range(10_000)])
    np.testing.assert_allclose(draws.mean(axis=0), 1 / 3, atol=0.02)
    # Var = (m-1) / (m^2 (m+1)) for a flat Dirichlet
    np.testing.assert_allclose(draws.var(axis=0), 2 / 36, atol=0.01)


def test_mixture_old_face_exact_zero():
    rng = np.random.default_rng(1)
    draws = np.array([sp.sample_alpha(2, 3, "mixture", rng) for _ in range(4000)])
    old = draws[:, 2] == 0.0
    assert 0.45 < old.mean() < 0.55
    np.testing.assert_allclose(draws[old, :2].mean(axis=0), 0.5, atol=0.03)


def test_peaked_concentration():
    rng = np.random.default_rng(2)
    draws = np.array([sp.sample_alpha(4, 4, "peaked", rng) for _ in range(10_000)])
    np.testing.assert_allclose(draws.mean(axis=0), 0.25, atol=0.02)
    # concentration 1/m per coordinate: Var = (1/m)(1 - 1/m) / (1 + 1) for total concentration 1
    np.testing.assert_allclose(draws.var(axis=0), 0.25 * 0.75 / 2, atol=0.01)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 5), st.sampled_from(sp.MODES), st.integers(0, 2**31))
def test_samples_on_simplex(m_old, extra, mode, seed):
    a = sp.sample_alpha(m_old, m_old + extra, mode, np.random.default_rng(seed))
    sp.check_alpha(a, m_old + extra)


# -- grow / decide / commit ---------------------------------------------------

def test_grow_mean_and_frozen():
    sub = _sub([[1.0, 3.0], [3.0, 1.0]])
    before = sub.anchors.copy()
    g = sp.grow(sub)
    np.testing.assert_array_equal(g.anchors[-1], [2.0, 2.0])
    assert np.array_equal(sub.anchors, before) and np.array_equal(g.anchors[:2], before)
    assert g.trainable and np.array_equal(g.frozen, before)
    one = sp.grow(_sub([[5.0, -1.0]]))
    assert np.array_equal(one.anchors[1], [5.0, -1.0])


def test_grow_cap():
    sub = sp.Subspace(SIG2, np.zeros((4, 4)), alpha_max=4)
    with pytest.raises(CapacityError):
        sp.grow(sub)


@pytest.mark.parametrize("w_new,w_old,eps,want", [(1.2, 1.0, 0.1, True), (1.1, 1.0, 0.1, False),
                                                  (0.01, -1.0, 0.1, True), (-2.0, -1.0, 0.1, False),
                                                  (0.0, 0.0, 0.0, False), (5.0, 1.0, 1e18, False),
                                                  (-0.5, 1.0, -2.0, True), (-1.0, 1.0, -2.0, False)])
def test_decide(w_new, w_old, eps, want):
    d = sp.decide(w_new, w_old, eps)
    assert d.extended is want and d.w_new == w_new and d.epsilon == eps


def test_decide_warns_on_negative_old(caplog):
    with caplog.at_level("WARNING"):
        sp.decide(1.0, -0.5, 0.1)
    assert "negative" in caplog.text


def test_commit_paths():
    rng = np.random.default_rng(0)
    base = sp.Subspace(SIG2, rng.normal(size=(2, 4)))
    reg = sp.PolicyRegistry().with_entry("a", np.array([1.0, 0.0])).with_entry("b", np.array([0.3, 0.7]))
    grown = sp.grow(base)
    grown.anchors[-1] += rng.normal(size=4)
    pruned, reg_p = sp.commit(grown, reg, sp.decide(0.0, 1.0, 0.1), np.array([0, 0, 1.0]),
                              np.array([0.6, 0.4, 0.0]), "c")
    assert np.array_equal(pruned.anchors, base.anchors) and not pruned.trainable
    assert len(reg_p) == 3 and np.array_equal(reg_p.entries[2].alpha, [0.6, 0.4])
    ext, reg_e = sp.commit(grown, reg, sp.decide(2.0, 1.0, 0.1), np.array([0.2, 0.0, 0.8]),
                           np.array([1.0, 0.0, 0.0]), "c")
    assert ext.n_anchors == 3 and len(reg_e) == 3
    for i in range(2):
        assert np.array_equal(sp.retrieve(ext, reg_e, i).values, sp.retrieve(base, reg, i).values)
    assert np.array_equal(reg.entries[0].alpha, [1.0, 0.0])  # stored alphas untouched
    with pytest.raises(InputError):
        sp.commit(grown, reg, sp.decide(0.0, 1.0, 0.1), np.ones(3) / 3, np.ones(3) / 3)


# -- W estimation -------------------------------------------------------------

def test_estimate_w_constant_and_single_pair():
    rng = np.random.default_rng(0)
    sig = dn.ArchSignature((22, 1), ("identity",))
    const = dn.ParamVector(sig, np.r_[np.zeros(22), 3.5])
    buf = _buffer(rng)
    for a in ([1.0], [0.2, 0.8], np.ones(5) / 5):
        assert sp.estimate_W(const, buf, a, rng=rng) == 3.5
    one = _buffer(rng, 1)
    c = dn.init_params(sig, rng)
    want = sac.critic_eval(c, one.obs[0], one.act[0], np.array([0.4, 0.6]))
    assert sp.estimate_W(c, one, [0.4, 0.6], n_pairs=7, rng=rng) == pytest.approx(want, abs=1e-14)
    with pytest.raises(InputError):
        sp.estimate_W(c, sac.ReplayBuffer(3), [1.0], rng=rng)


def test_estimate_w_exhaustive_mean():
    rng = np.random.default_rng(1)
    sig = dn.ArchSignature((22, 8, 1), ("tanh", "identity"))
    c = dn.init_params(sig, rng)
    buf = _buffer(rng, 20)
    a = np.array([0.1, 0.9])
    exhaustive = np.mean([sac.critic_eval(c, buf.obs[i], buf.act[i], a) for i in range(20)])
    pairs = sp.sample_pairs(buf, 20, rng, replace_=False)
    assert sp.estimate_W(c, buf, a, pairs=pairs) == pytest.approx(exhaustive, abs=1e-12)


def test_twin_w_uses_pairwise_minimum():
    rng = np.random.default_rng(2)
    sig = dn.ArchSignature((22, 8, 1), ("tanh", "identity"))
    c1, c2 = dn.init_params(sig, rng), dn.init_params(sig, rng)
    buf = _buffer(rng, 10)
    pairs = sp.sample_pairs(buf, 10, rng, replace_=False)
    a = np.array([0.5, 0.5])
    q1 = sac.critic_eval(c1, pairs.obs, pairs.act, a)
    q2 = sac.critic_eval(c2, pairs.obs, pairs.act, a)
    got = sp.w_values([c1, c2], pairs, a[None, :])[0]
    assert got == pytest.approx(np.mean(np.minimum(q1, q2)), abs=1e-13)


# -- best_alpha ---------------------------------------------------------------

def test_best_alpha_linear_critic_goes_to_vertex():
    rng = np.random.default_rng(0)
    buf = _buffer(rng)
    c = np.array([0.3, 1.0, 0.2, 0.6])
    sel = sp.best_alpha(_linear_critic(c), buf, 3, 4, rng, n_candidates=4096)
    # old face (first three anchors): optimum at vertex 1
    assert sel.alpha_old[1] > 0.95 and sel.alpha_old[3] == 0.0
    assert sel.w_old == pytest.approx(float(sel.alpha_old @ c), abs=1e-13)
    assert sel.alpha_new[1] > 0.95


def test_best_alpha_forced_candidates():
    rng = np.random.default_rng(1)
    buf = _buffer(rng)
    # newest vertex is the exact optimum of the new simplex
    sel = sp.best_alpha(_linear_critic([0.0, 0.0, 1.0]), buf, 2, 3, rng, n_candidates=3)
    assert np.array_equal(sel.alpha_new, [0, 0, 1.0]) and sel.w_new == 1.0
    # a stored alpha that is the old-face optimum is always found
    sel = sp.best_alpha(_linear_critic([0.0, 1.0, 0.0]), buf, 2, 3, rng, n_candidates=3,
                        stored=(np.array([0.0, 1.0]),))
    assert np.array_equal(sel.alpha_old, [0, 1.0, 0]) and sel.w_old == 1.0


def test_best_alpha_dense_grid_oracle():
    from csprl.iolog import barycentric_grid
    rng = np.random.default_rng(3)
    sig = dn.ArchSignature((22, 16, 1), ("tanh", "identity"))
    critic = dn.init_params(sig, rng)
    buf = _buffer(rng, 64)
    pairs = sp.sample_pairs(buf, 64, np.random.default_rng(9), replace_=False)
    grid = barycentric_grid(3, 60)
    w_grid = sp.w_values(critic, pairs, grid)
    q95 = np.quantile(w_grid, 0.95)
    hits = 0
    for s in range(10):
        new_c, _ = sp.face_candidates(2, 3, 256, np.random.default_rng(s))
        best = sp.w_values(critic, pairs, new_c).max()
        hits += best >= q95
    assert hits == 10


def test_best_alpha_degenerate_faces():
    rng = np.random.default_rng(4)
    sig = dn.ArchSignature((22, 16, 1), ("tanh", "identity"))
    critic = dn.init_params(sig, rng)
    buf = _buffer(rng, 64)
    gaps = [(lambda s: s.w_new - s.w_old)(sp.best_alpha(critic, buf, 3, 3, rng, n_pairs=64)) for _ in range(20)]
    spread = np.ptp(sp.w_values(critic, sp.sample_pairs(buf, 64, rng), np.eye(3)))
    assert abs(np.mean(gaps)) < 0.05 * spread + 1e-12


def test_best_alpha_tie_goes_to_first_candidate():
    rng = np.random.default_rng(5)
    sig = dn.ArchSignature((22, 1), ("identity",))
    const = dn.ParamVector(sig, np.r_[np.zeros(22), 1.0])
    sel = sp.best_alpha(const, _buffer(rng), 2, 3, rng, n_candidates=8, stored=(np.array([0.5, 0.5]),))
    assert np.array_equal(sel.alpha_new, [0, 0, 1.0])
    assert np.array_equal(sel.alpha_old, [0.5, 0.5, 0.0])


def test_refinement_prefers_rollout_best():
    """With a flat critic the rollout re-ranking alone decides; full throttle beats standing still."""
    sig = sac.SacConfig(hidden=(4,)).actor_signature()
    still = np.zeros(sig.n_params)
    go = np.zeros(sig.n_params)
    go[sig.layout[-1][1]] = 3.0  # bias of the x-mean head
    sub = sp.Subspace(sig, np.stack([still, go]), trainable=True)
    csig = dn.ArchSignature((22, 1), ("identity",))
    const = dn.ParamVector(csig, np.r_[np.zeros(22), 1.0])
    rng = np.random.default_rng(0)
    sel = sp.best_alpha(const, _buffer(rng), 1, 2, rng, n_candidates=16, subspace=sub,
                        env_params=envs.EnvParams())
    plain = sp.best_alpha(const, _buffer(rng), 1, 2, np.random.default_rng(0), n_candidates=16)
    assert np.array_equal(sel.alpha_new, [0, 1.0])
    assert sel.alpha_new[1] >= plain.alpha_new[1]


# -- registry -----------------------------------------------------------------

def test_registry_padding_only_grows():
    reg = sp.PolicyRegistry().with_entry("a", np.array([0.5, 0.5]), 12.0)
    p = reg.padded(4)
    assert np.array_equal(p.entries[0].alpha, [0.5, 0.5, 0, 0]) and p.entries[0].reference == 12.0
    with pytest.raises(InputError):
        reg.padded(1)


def test_decision_monotone_in_epsilon():
    rng = np.random.default_rng(0)
    pairs = [(rng.uniform(0, 2), rng.uniform(0, 2)) for _ in range(50)]
    eps = [-2, -1, -0.5, 0, 0.1, 0.25, 0.5, 1, 10, 1e18]
    counts = [sum(sp.decide(a, b, e).extended for a, b in pairs) for e in eps]
    assert all(x >= y for x, y in zip(counts, counts[1:]))
    assert counts[0] == 50 and counts[-1] == 0
