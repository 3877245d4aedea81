"""Policy subspaces: anchors, convex combination, alpha sampling and the grow/extend-or-prune cycle.

A subspace is an ordered stack of anchor parameter vectors sharing one
architecture. Any convex weight vector ``alpha`` selects the policy whose
parameters are ``sum_i alpha_i * theta_i``. Learning a new task always grows
the subspace by one anchor, trains that anchor with alphas drawn around the
simplex, and then uses an alpha-conditioned critic to decide whether the new
anchor is worth keeping.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import envs, sac
from ._backend import kernels
from .diffnet import ArchSignature, ParamVector, init_params
from .errors import CapacityError, InputError

log = logging.getLogger(__name__)

ALPHA_TOL = 1e-9
DEFAULT_ALPHA_MAX = 16
MODES = ("mixture", "flat", "peaked")


@dataclass
class Subspace:
    """Anchors stacked row-wise; when ``trainable`` the last row is still being learned."""

    signature: ArchSignature
    anchors: np.ndarray
    trainable: bool = False
    alpha_max: int = DEFAULT_ALPHA_MAX

    def __post_init__(self):
        self.anchors = np.ascontiguousarray(np.atleast_2d(self.anchors), dtype=np.float64)
        m, p = self.anchors.shape
        if p != self.signature.n_params:
            raise InputError(f"anchors have {p} parameters, signature needs {self.signature.n_params}")
        if not 1 <= m <= self.alpha_max:
            raise CapacityError(f"anchor count {m} outside [1, {self.alpha_max}]")

    @classmethod
    def single(cls, actor: ParamVector, alpha_max: int = DEFAULT_ALPHA_MAX) -> "Subspace":
        return cls(actor.signature, actor.values[None, :].copy(), False, alpha_max)

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]

    def anchor(self, i: int) -> ParamVector:
        return ParamVector(self.signature, self.anchors[i].copy())

    @property
    def frozen(self) -> np.ndarray:
        """Rows that no longer receive gradients."""
        return self.anchors[:-1] if self.trainable else self.anchors

    def copy(self) -> "Subspace":
        return replace(self, anchors=self.anchors.copy())


@dataclass
class RegistryEntry:
    name: str
    alpha: np.ndarray
    reference: float = math.nan


@dataclass
class PolicyRegistry:
    """Per finished task: the alpha that retrieves its policy and its normalisation reference."""

    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def alphas(self) -> list:
        return [e.alpha for e in self.entries]

    def padded(self, m: int) -> "PolicyRegistry":
        """Every stored alpha zero-padded to length ``m``."""
        out = []
        for e in self.entries:
            if len(e.alpha) > m:
                raise InputError("cannot shrink a stored alpha")
            a = np.zeros(m)
            a[:len(e.alpha)] = e.alpha
            out.append(RegistryEntry(e.name, a, e.reference))
        return PolicyRegistry(out)

    def with_entry(self, name: str, alpha: np.ndarray, reference: float = math.nan) -> "PolicyRegistry":
        return PolicyRegistry(self.entries + [RegistryEntry(name, np.array(alpha, dtype=np.float64), reference)])

    def copy(self) -> "PolicyRegistry":
        return PolicyRegistry([RegistryEntry(e.name, e.alpha.copy(), e.reference) for e in self.entries])


@dataclass(frozen=True)
class GrowDecision:
    w_new: float
    w_old: float
    epsilon: float
    extended: bool


# -- simplex helpers -----------------------------------------------------------

def check_alpha(alpha, m: Optional[int] = None) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 1 or (m is not None and a.shape[0] != m):
        raise InputError(f"alpha must be a vector of length {m}, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < 0.0) or abs(a.sum() - 1.0) > ALPHA_TOL:
        raise InputError(f"alpha {a} is not on the simplex")
    return a


def pad(alpha: np.ndarray, m: int) -> np.ndarray:
    out = np.zeros(m)
    out[:len(alpha)] = alpha
    return out


def vertex(m: int, i: int) -> np.ndarray:
    out = np.zeros(m)
    out[i] = 1.0
    return out


def combine(subspace: Subspace, alpha) -> ParamVector:
    """``sum_i alpha_i * theta_i`` accumulated left to right over the nonzero weights.

    Zero weights are skipped, so a one-hot alpha returns its anchor bit-exactly
    and zero-padding an alpha never changes the result.
    """
    a = check_alpha(alpha, subspace.n_anchors)
    out = None
    for i, w in enumerate(a):
        if w == 0.0:
            continue
        term = w * subspace.anchors[i]
        out = term if out is None else out + term
    return ParamVector(subspace.signature, out)


def _dirichlet(rng: np.random.Generator, m: int, concentration: float) -> np.ndarray:
    while True:
        g = rng.standard_gamma(concentration, size=m)
        s = g.sum()
        if s > 0.0:
            return g / s


def sample_alpha(m_old: int, m_new: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    """One alpha of length ``m_new``.

    ``mixture`` flips a fair coin between a flat Dirichlet over all ``m_new``
    anchors and a flat Dirichlet over the first ``m_old`` (zero-padded).
    ``flat`` always uses the full simplex, ``peaked`` uses concentration ``1/m_new``.
    """
    if not 1 <= m_old <= m_new:
        raise InputError(f"need 1 <= m_old <= m_new, got {m_old}, {m_new}")
    if mode not in MODES:
        raise InputError(f"unknown sampling mode {mode!r}")
    if m_new == 1:
        return np.ones(1)
    if mode == "flat":
        return _dirichlet(rng, m_new, 1.0)
    if mode == "peaked":
        return _dirichlet(rng, m_new, 1.0 / m_new)
    if rng.random() < 0.5:
        return _dirichlet(rng, m_new, 1.0)
    return pad(_dirichlet(rng, m_old, 1.0), m_new)


def grow(subspace: Subspace) -> Subspace:
    """Append a trainable anchor initialised at the mean of the existing ones."""
    if subspace.n_anchors >= subspace.alpha_max:
        raise CapacityError(f"anchor cap {subspace.alpha_max} reached")
    new = subspace.anchors.mean(axis=0)
    return Subspace(subspace.signature, np.vstack([subspace.anchors, new[None, :]]), True,
                    subspace.alpha_max)


# -- critic-based value of an alpha -------------------------------------------

@dataclass(frozen=True)
class PairSample:
    """A fixed set of buffer ``(s, a)`` pairs shared by every alpha in one comparison."""

    obs: np.ndarray
    act: np.ndarray


def sample_pairs(buffer: sac.ReplayBuffer, n_pairs: int, rng: np.random.Generator,
                 replace_: bool = True) -> PairSample:
    size = buffer.size
    if size == 0:
        raise InputError("cannot estimate W from an empty buffer")
    if replace_:
        idx = rng.integers(0, size, size=n_pairs)
    else:
        if n_pairs > size:
            raise InputError("not enough transitions to sample without replacement")
        idx = rng.permutation(size)[:n_pairs]
    return PairSample(buffer.obs[idx].copy(), buffer.act[idx].copy())


def w_values(critic, pairs: PairSample, alphas: np.ndarray, chunk_rows: int = 65536) -> np.ndarray:
    """``W(alpha)`` for every row of ``alphas`` on the same pairs.

    ``critic`` is one network or a sequence of twins; with twins the
    per-pair minimum is averaged, the same pessimism SAC uses for its targets.
    """
    critics = [critic] if isinstance(critic, ParamVector) else list(critic)
    alphas = np.atleast_2d(alphas)
    sig = critics[0].signature
    n_sa = pairs.obs.shape[1] + pairs.act.shape[1]
    alpha_max = sig.n_in - n_sa
    if alphas.shape[1] > alpha_max:
        raise InputError(f"alpha length {alphas.shape[1]} exceeds critic cap {alpha_max}")
    n = pairs.obs.shape[0]
    per = max(1, chunk_rows // n)
    out = np.empty(alphas.shape[0])
    base = np.zeros((n, sig.n_in))
    base[:, :pairs.obs.shape[1]] = pairs.obs
    base[:, pairs.obs.shape[1]:n_sa] = pairs.act
    for c0 in range(0, alphas.shape[0], per):
        block = alphas[c0:c0 + per]
        x = np.tile(base, (block.shape[0], 1))
        x[:, n_sa:n_sa + block.shape[1]] = np.repeat(block, n, axis=0)
        q = None
        for c in critics:
            qc, _ = kernels.mlp_forward(c.values, sig.layout, x)
            q = qc[:, 0] if q is None else np.minimum(q, qc[:, 0])
        out[c0:c0 + block.shape[0]] = q.reshape(block.shape[0], n).mean(axis=1)
    return out


def estimate_W(critic: ParamVector, buffer: sac.ReplayBuffer, alpha, n_pairs: int = 1024,
               rng: Optional[np.random.Generator] = None, pairs: Optional[PairSample] = None) -> float:
    """Mean critic value of ``alpha`` over buffer pairs (fresh pairs unless ``pairs`` is given)."""
    if pairs is None:
        if rng is None:
            raise InputError("estimate_W needs an rng or a fixed pair sample")
        pairs = sample_pairs(buffer, n_pairs, rng)
    return float(w_values(critic, pairs, np.asarray(alpha, dtype=np.float64)[None, :])[0])


@dataclass
class Selection:
    alpha_old: np.ndarray
    w_old: float
    alpha_new: np.ndarray
    w_new: float


def face_candidates(m_old: int, m_new: int, n_candidates: int, rng: np.random.Generator,
                    stored: tuple = ()) -> tuple[np.ndarray, np.ndarray]:
    """Candidate alphas for the new simplex and the old face, forced ones first.

    The new face always contains the newest vertex and the old face every
    stored task alpha, all zero-padded to ``m_new``.
    """
    new = [vertex(m_new, m_new - 1)]
    new += [_dirichlet(rng, m_new, 1.0) if m_new > 1 else np.ones(1) for _ in range(n_candidates)]
    old = [pad(np.asarray(a, dtype=np.float64), m_new) for a in stored]
    old += [pad(_dirichlet(rng, m_old, 1.0) if m_old > 1 else np.ones(1), m_new)
            for _ in range(n_candidates)]
    return np.array(new), np.array(old)


def _rollout_scores(subspace: Subspace, alphas: np.ndarray, env_params: envs.EnvParams,
                    n_episodes: int, seed) -> np.ndarray:
    """Mean deterministic return of each alpha's combined policy, every alpha on the same starts."""
    scores = np.empty(alphas.shape[0])
    for i, a in enumerate(alphas):
        scores[i] = sac.evaluate(combine(subspace, a), env_params, n_episodes, seed)
    return scores


def _argmax(values: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest-index tie-break
    return int(np.argmax(values))


def best_alpha(critic, buffer: sac.ReplayBuffer, m_old: int, m_new: int,
               rng: np.random.Generator, n_candidates: int = 256, n_pairs: int = 1024,
               stored: tuple = (), subspace: Optional[Subspace] = None,
               env_params: Optional[envs.EnvParams] = None, top_k: int = 8) -> Selection:
    """Per-face argmax of W, optionally re-ranked by one rollout for each of the top ``top_k``."""
    if not 1 <= m_old <= m_new:
        raise InputError(f"need 1 <= m_old <= m_new, got {m_old}, {m_new}")
    new_c, old_c = face_candidates(m_old, m_new, n_candidates, rng, stored)
    pairs = sample_pairs(buffer, n_pairs, rng)
    w_new = w_values(critic, pairs, new_c)
    w_old = w_values(critic, pairs, old_c)
    refine = env_params is not None
    if refine and subspace is None:
        raise InputError("rollout refinement needs the subspace")
    picks = []
    for cands, w in ((old_c, w_old), (new_c, w_new)):
        if refine:
            order = np.argsort(-w, kind="stable")[:top_k]
            seed = int(rng.integers(2**63))
            scores = _rollout_scores(subspace, cands[order], env_params, 1, seed)
            i = int(order[_argmax(scores)])
        else:
            i = _argmax(w)
        picks.append((cands[i].copy(), float(w[i])))
    (a_old, v_old), (a_new, v_new) = picks
    return Selection(a_old, v_old, a_new, v_new)


def decide(w_new: float, w_old: float, epsilon: float) -> GrowDecision:
    """Keep the new anchor iff ``w_new > (1 + epsilon) * w_old`` (strict, applied verbatim)."""
    if w_old < 0:
        log.warning("W_old = %.4g is negative; the relative threshold flips meaning", w_old)
    return GrowDecision(float(w_new), float(w_old), float(epsilon),
                        bool(w_new > (1.0 + epsilon) * w_old))


def commit(subspace: Subspace, registry: PolicyRegistry, decision: GrowDecision,
           alpha_new: np.ndarray, alpha_old: np.ndarray, task_name: str = "",
           reference: float = math.nan) -> tuple[Subspace, PolicyRegistry]:
    """Freeze or drop the grown anchor and record the chosen alpha for the task."""
    m = subspace.n_anchors
    if decision.extended:
        out = Subspace(subspace.signature, subspace.anchors.copy(), False, subspace.alpha_max)
        reg = registry.padded(m).with_entry(task_name, check_alpha(alpha_new, m), reference)
    else:
        out = Subspace(subspace.signature, subspace.anchors[:-1].copy(), False, subspace.alpha_max)
        a = check_alpha(alpha_old, m)
        if a[-1] != 0.0:
            raise InputError("the pruned alpha must not weight the dropped anchor")
        reg = registry.padded(m - 1).with_entry(task_name, a[:-1].copy(), reference)
    return out, reg


def retrieve(subspace: Subspace, registry: PolicyRegistry, i: int) -> ParamVector:
    """Policy stored for task ``i``."""
    return combine(subspace, pad(registry.entries[i].alpha, subspace.n_anchors))


# -- one task, end to end ------------------------------------------------------

Selector = Callable[..., Selection]


@dataclass
class TaskOutcome:
    subspace: Subspace
    registry: PolicyRegistry
    decision: Optional[GrowDecision]
    state: sac.SacState
    buffer: sac.ReplayBuffer
    grown: Optional[Subspace] = None
    critics: Optional[list] = None


def mixture_sampler(m_old: int, m_new: int, mode: str = "mixture"):
    def sampler(rng):
        return sample_alpha(m_old, m_new, mode, rng)
    return sampler


def refit_critics(subspace: Subspace, state: sac.SacState, buffer: sac.ReplayBuffer,
                  config: sac.SacConfig, rng: np.random.Generator, n_updates: int) -> list:
    """Fresh twin critics fitted on ``buffer`` with every anchor frozen.

    The critics trained alongside the new anchor overrate it, because the anchor
    is optimised against them while the frozen anchors are not. A critic fitted
    after training, with no actor steps, has no such bias. Uses no environment
    interaction.
    """
    m = subspace.n_anchors
    ev = sac.new_state(subspace.anchor(m - 1), config, rng, subspace.anchors[:-1])
    ev.log_temp[:] = state.log_temp
    for _ in range(n_updates):
        sac.update(ev, buffer, config, rng, critic_only=True)
    return ev.critics


def csp_learn_task(subspace: Optional[Subspace], registry: PolicyRegistry, task: envs.TaskSpec,
                   config: sac.SacConfig, epsilon: float, rng: np.random.Generator,
                   selector: Optional[Selector] = None, refine: bool = False,
                   n_candidates: int = 256, sampling: str = "mixture",
                   refit_updates: int = 0) -> TaskOutcome:
    """Grow, train the new anchor, pick alphas, then extend or prune.

    With ``refit_updates > 0`` the alphas are scored by critics refitted
    after training (see :func:`refit_critics`) instead of the training critics.
    ``selector(subspace=, state=, buffer=, critics=, m_old=, m_new=, stored=, task=, rng=)``
    may replace the critic-based :func:`best_alpha`. The returned buffer is
    still open; the caller owns closing it.
    """
    if subspace is None:
        actor = init_params(config.actor_signature(), rng)
        state, buffer = sac.train_on_task(actor, task, config, rng)
        sub = Subspace.single(state.actor, config.alpha_max)
        return TaskOutcome(sub, registry.with_entry(task.name, np.ones(1)), None, state, buffer)

    grown = grow(subspace)
    m_old, m_new = subspace.n_anchors, grown.n_anchors
    state, buffer = sac.train_on_task(grown.anchor(m_new - 1), task, config, rng,
                                      alpha_sampler=mixture_sampler(m_old, m_new, sampling),
                                      frozen=grown.frozen)
    grown = Subspace(grown.signature, state.anchors.copy(), True, grown.alpha_max)
    stored = tuple(registry.padded(m_old).alphas)
    critics = state.critics
    if refit_updates > 0:
        critics = refit_critics(grown, state, buffer, config, rng, refit_updates)
    if selector is None:
        sel = best_alpha(critics, buffer, m_old, m_new, rng, n_candidates=n_candidates,
                         stored=stored, subspace=grown,
                         env_params=task.env_params if refine else None)
    else:
        sel = selector(subspace=grown, state=state, buffer=buffer, critics=critics, m_old=m_old,
                       m_new=m_new, stored=stored, task=task, rng=rng)
    decision = decide(sel.w_new, sel.w_old, epsilon)
    sub, reg = commit(grown, registry, decision, sel.alpha_new, sel.alpha_old, task.name)
    return TaskOutcome(sub, reg, decision, state, buffer, grown, critics)
