"""Reference continual learners built on the shared SAC trainer.

Every learner exposes the same small interface used by the scenario runner:
``learn_task`` trains on one task and returns a :class:`TaskResult`,
``policy(i)`` retrieves the policy currently used for past task ``i`` and
``model_size()`` reports memory in units of one actor network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import envs, sac, subspace as sp
from ._backend import kernels
from .diffnet import ParamVector, init_params, squared_sample_gradients
from .errors import ConfigError, InputError

METHODS = ("ft1", "ftl2", "ewc", "sacn", "ftn", "csp", "csp_linear", "csp_oracle")
LINEAR_EPSILON = -2.0


@dataclass
class MethodConfig:
    method: str = "csp"
    reg_coef: float = 1.0
    epsilon: float = 0.1
    refine: bool = False
    refit_updates: int = 0
    n_candidates: int = 256
    oracle_rollouts: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not self.reg_coef >= 0:
            raise ConfigError("regularisation coefficient must be >= 0")
        if self.method == "csp_linear":
            self.epsilon = LINEAR_EPSILON


@dataclass
class FisherDiag:
    importance: np.ndarray
    reference: np.ndarray

    def __post_init__(self):
        if self.importance.shape != self.reference.shape:
            raise InputError("Fisher and reference lengths differ")
        if np.any(self.importance < 0) or not np.all(np.isfinite(self.importance)):
            raise InputError("Fisher entries must be finite and nonnegative")


@dataclass
class TaskResult:
    state: sac.SacState
    buffer: sac.ReplayBuffer
    decision: Optional[sp.GrowDecision] = None
    extra: dict = field(default_factory=dict)


# -- penalties -----------------------------------------------------------------

def l2_penalty(params: np.ndarray, reference: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """``lam/2 * sum (p - p*)^2`` and its gradient."""
    d = params - reference
    return 0.5 * lam * float(np.sum(d * d)), lam * d


def ewc_penalty(params: np.ndarray, fishers: list, lam: float) -> tuple[float, np.ndarray]:
    """``lam/2 * sum_tasks sum_p F_p (p - p*_task)^2`` and its gradient.

    With a single unit Fisher every operation matches :func:`l2_penalty`.
    """
    loss = 0.0
    grad = np.zeros_like(params)
    for k, f in enumerate(fishers):
        d = params - f.reference
        fd = f.importance * d
        if k == 0:
            loss = 0.5 * lam * float(np.sum(fd * d))
            grad = lam * fd
        else:
            loss += 0.5 * lam * float(np.sum(fd * d))
            grad = grad + lam * fd
    return loss, grad


def score_cotangents(mean: np.ndarray, log_std_raw: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Per-sample gradient of ``log pi(a|s)`` with respect to the actor head outputs.

    The action ``a = tanh(u)`` is held fixed, so the tanh correction does not
    depend on the parameters; with ``z = (u - mean)/std`` the derivatives are
    ``z/std`` for the mean and ``z^2 - 1`` for ``log_std`` (zero where clamped).
    """
    ls = np.clip(log_std_raw, sac.LOG_STD_MIN, sac.LOG_STD_MAX)
    inside = (log_std_raw > sac.LOG_STD_MIN) & (log_std_raw < sac.LOG_STD_MAX)
    return np.hstack([noise / np.exp(ls), (noise * noise - 1.0) * inside])


def fisher_estimate(actor: ParamVector, buffer: sac.ReplayBuffer, rng: np.random.Generator,
                    n_samples: int = 1024) -> FisherDiag:
    """Diagonal Fisher: mean squared score over buffer states with actions drawn from the policy."""
    if buffer.size == 0:
        raise InputError("cannot estimate a Fisher diagonal from an empty buffer")
    obs = buffer.obs[buffer.sample_indices(rng, n_samples)]
    out, _ = kernels.mlp_forward(actor.values, actor.signature.layout, np.ascontiguousarray(obs))
    a = envs.ACT_DIM
    noise = rng.standard_normal((n_samples, a))
    ct = score_cotangents(out[:, :a], out[:, a:], noise)
    sq = squared_sample_gradients(actor, obs, ct)
    return FisherDiag(sq / n_samples, actor.values.copy())


# -- oracle alpha selection ----------------------------------------------------

def rollout_returns(subspace: sp.Subspace, alphas: np.ndarray, env_params: envs.EnvParams,
                    n_rollouts: int, seed, chunk: int = 64) -> np.ndarray:
    """Mean deterministic return of every alpha, all on the same ``n_rollouts`` start states."""
    alphas = np.atleast_2d(alphas)
    layout = subspace.signature.layout
    out = np.empty(alphas.shape[0])
    for c0 in range(0, alphas.shape[0], chunk):
        block = alphas[c0:c0 + chunk]
        n = block.shape[0] * n_rollouts
        venv = envs.PointMassVec(env_params, n)
        obs = venv.reset(np.random.default_rng(seed))
        # every candidate sees the same starts
        obs = np.tile(obs[:n_rollouts], (block.shape[0], 1))
        venv.position = np.tile(venv.position[:n_rollouts], (block.shape[0], 1))
        venv.velocity = np.tile(venv.velocity[:n_rollouts], (block.shape[0], 1))
        rows = np.ascontiguousarray(np.repeat(block, n_rollouts, axis=0))
        total = np.zeros(n)
        done = False
        while not done:
            if subspace.n_anchors == 1:
                y, _ = kernels.mlp_forward(subspace.anchors[0], layout, np.ascontiguousarray(obs))
            else:
                y, _ = kernels.mix_forward(subspace.anchors, rows, layout, np.ascontiguousarray(obs))
            obs, reward, done = venv.step(np.tanh(y[:, :envs.ACT_DIM]))
            total += reward
        venv.close()
        out[c0:c0 + block.shape[0]] = total.reshape(block.shape[0], n_rollouts).mean(axis=1)
    return out


def csp_oracle_select(subspace: sp.Subspace, env_params: envs.EnvParams, m_old: int,
                      rng: np.random.Generator, n_candidates: int = 256,
                      rollouts_per_candidate: int = 10, stored: tuple = ()) -> sp.Selection:
    """Like :func:`subspace.best_alpha` but candidates are scored by Monte-Carlo returns."""
    m_new = subspace.n_anchors
    if m_new == 1:
        one = np.ones(1)
        w = float(rollout_returns(subspace, one[None, :], env_params, rollouts_per_candidate,
                                  int(rng.integers(2**63)))[0])
        return sp.Selection(one, w, one.copy(), w)
    new_c, old_c = sp.face_candidates(m_old, m_new, n_candidates, rng, stored)
    seed = int(rng.integers(2**63))
    w_new = rollout_returns(subspace, new_c, env_params, rollouts_per_candidate, seed)
    w_old = rollout_returns(subspace, old_c, env_params, rollouts_per_candidate, seed)
    i, j = int(np.argmax(w_old)), int(np.argmax(w_new))
    return sp.Selection(old_c[i].copy(), float(w_old[i]), new_c[j].copy(), float(w_new[j]))


# -- learners ------------------------------------------------------------------

class Learner:
    """Base class: holds the method config and the SAC config."""

    name = "base"

    def __init__(self, method: MethodConfig, config: sac.SacConfig):
        self.method = method
        self.config = config
        self.n_tasks = 0

    def learn_task(self, task: envs.TaskSpec, rng: np.random.Generator) -> TaskResult:
        raise NotImplementedError

    def policy(self, i: int) -> ParamVector:
        raise NotImplementedError

    def model_size(self) -> float:
        raise NotImplementedError

    def _fresh_actor(self, rng: np.random.Generator) -> ParamVector:
        return init_params(self.config.actor_signature(), rng)


class FineTune(Learner):
    """FT-1, FT-L2 and EWC: one actor finetuned across tasks, optionally anchored to the past."""

    def __init__(self, method: MethodConfig, config: sac.SacConfig):
        super().__init__(method, config)
        self.actor: Optional[ParamVector] = None
        self.fishers: list = []
        self.name = method.method

    def _penalty(self):
        lam = self.method.reg_coef
        if self.actor is None:
            return None
        if self.name == "ftl2":
            ref = self.actor.values.copy()
            return lambda p: l2_penalty(p, ref, lam)
        if self.name == "ewc" and self.fishers:
            fishers = list(self.fishers)
            return lambda p: ewc_penalty(p, fishers, lam)
        return None

    def learn_task(self, task, rng):
        start = self._fresh_actor(rng) if self.actor is None else self.actor
        state, buffer = sac.train_on_task(start, task, self.config, rng, penalty=self._penalty())
        self.actor = state.actor.copy()
        if self.name == "ewc":
            self.fishers.append(fisher_estimate(self.actor, buffer, rng))
        self.n_tasks += 1
        return TaskResult(state, buffer)

    def policy(self, i):
        return self.actor

    def model_size(self):
        return {"ft1": 1.0, "ftl2": 2.0, "ewc": 3.0}[self.name]


class PerTask(Learner):
    """SAC-N (fresh actor per task) and FT-N (warm start from the previous task's actor)."""

    def __init__(self, method: MethodConfig, config: sac.SacConfig):
        super().__init__(method, config)
        self.models: list = []
        self.name = method.method

    def learn_task(self, task, rng):
        warm = self.name == "ftn" and self.models
        start = self.models[-1] if warm else self._fresh_actor(rng)
        state, buffer = sac.train_on_task(start, task, self.config, rng)
        self.models.append(state.actor.copy())
        self.n_tasks += 1
        return TaskResult(state, buffer)

    def policy(self, i):
        return self.models[i]

    def model_size(self):
        return float(len(self.models))


class CSP(Learner):
    """The growing subspace learner and its threshold/oracle ablations."""

    def __init__(self, method: MethodConfig, config: sac.SacConfig):
        super().__init__(method, config)
        self.subspace: Optional[sp.Subspace] = None
        self.registry = sp.PolicyRegistry()
        self.decisions: list = []
        self.name = method.method

    def _oracle(self, subspace, m_old, stored, task, rng, **_):
        return csp_oracle_select(subspace, task.env_params, m_old, rng, self.method.n_candidates,
                                 self.method.oracle_rollouts, stored)

    def learn_task(self, task, rng):
        mc = self.method
        selector = self._oracle if self.name == "csp_oracle" else None
        out = sp.csp_learn_task(self.subspace, self.registry, task, self.config, mc.epsilon, rng,
                                selector=selector, refine=mc.refine, n_candidates=mc.n_candidates,
                                refit_updates=mc.refit_updates)
        self.subspace, self.registry = out.subspace, out.registry
        if out.decision is not None:
            self.decisions.append(out.decision)
        self.n_tasks += 1
        return TaskResult(out.state, out.buffer, out.decision,
                          {"grown": out.grown, "critics": out.critics})

    def policy(self, i):
        return sp.retrieve(self.subspace, self.registry, i)

    def model_size(self):
        return float(self.subspace.n_anchors)


def make_learner(method: MethodConfig, config: sac.SacConfig) -> Learner:
    if method.method in ("ft1", "ftl2", "ewc"):
        return FineTune(method, config)
    if method.method in ("sacn", "ftn"):
        return PerTask(method, config)
    return CSP(method, config)


def model_size(method: str, n_tasks: int, n_anchors: Optional[int] = None) -> float:
    """Final memory over one actor's parameter count, by method."""
    if method in ("ft1", "ftl2", "ewc"):
        return {"ft1": 1.0, "ftl2": 2.0, "ewc": 3.0}[method]
    if method in ("sacn", "ftn"):
        return float(n_tasks)
    if n_anchors is None:
        raise InputError("CSP model size needs the anchor count")
    return float(n_anchors)
