"""Soft actor-critic with twin critics, learned temperature and an alpha-tagged buffer.

The actor may be the last anchor of a policy subspace: each stored transition
carries the convex weights ``alpha`` it was collected with, the policy for a
sample is the ``alpha``-weighted combination of all anchors, and only the last
anchor receives gradients. Plain SAC is the one-anchor case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import envs
from ._backend import kernels
from .diffnet import AdamState, ArchSignature, ParamVector, adam_step, init_params
from .errors import InputError, TaskIsolationError, TrainingFault

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

AlphaSampler = Callable[[np.random.Generator], np.ndarray]
Penalty = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass
class SacConfig:
    lr_policy: float = 3e-4
    lr_critic: float = 3e-4
    lr_entropy: float = 3e-4
    discount: float = 0.99
    polyak: float = 0.005
    batch_size: int = 256
    reward_scaling: float = 1.0
    warmup_steps: int = 2_000
    policy_update_delay: int = 2
    target_update_delay: int = 2
    updates_per_env_step: float = 0.5
    target_action_std: float = 0.1
    buffer_capacity: int = 200_000
    n_parallel: int = 8
    hidden: tuple = (64, 64)
    alpha_max: int = 16
    segment_length: int = 100
    init_temperature: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        positive = ("lr_policy", "lr_critic", "lr_entropy", "discount", "polyak", "batch_size",
                    "reward_scaling", "updates_per_env_step", "target_action_std",
                    "buffer_capacity", "n_parallel", "alpha_max", "segment_length",
                    "init_temperature")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if self.warmup_steps < 0:
            raise InputError("warmup_steps must be >= 0")
        if self.policy_update_delay < 1 or self.target_update_delay < 1:
            raise InputError("update delays must be >= 1")

    @property
    def target_entropy(self) -> float:
        # differential entropy of a diagonal Gaussian with the target std, pre-squash
        return envs.ACT_DIM * math.log(self.target_action_std * math.sqrt(2.0 * math.pi * math.e))

    def actor_signature(self) -> ArchSignature:
        return ArchSignature.mlp(envs.OBS_DIM, self.hidden, 2 * envs.ACT_DIM)

    def critic_signature(self) -> ArchSignature:
        return ArchSignature.mlp(envs.OBS_DIM + envs.ACT_DIM + self.alpha_max, self.hidden, 1)


class ReplayBuffer:
    """Fixed-capacity ring of ``(s, a, r, s', done, alpha)`` rows."""

    def __init__(self, capacity: int, obs_dim: int = envs.OBS_DIM, act_dim: int = envs.ACT_DIM,
                 alpha_dim: int = 16):
        self.capacity = int(capacity)
        self.obs = np.empty((capacity, obs_dim))
        self.act = np.empty((capacity, act_dim))
        self.rew = np.empty(capacity)
        self.next_obs = np.empty((capacity, obs_dim))
        self.done = np.empty(capacity)
        self.alpha = np.zeros((capacity, alpha_dim))
        self.inserted = 0
        self._closed = False

    @property
    def size(self) -> int:
        self._check()
        return min(self.inserted, self.capacity)

    def __len__(self) -> int:
        return self.size

    def close(self) -> None:
        """Poison the buffer; any later read raises :class:`TaskIsolationError`."""
        self._closed = True
        self.obs = self.act = self.rew = self.next_obs = self.done = self.alpha = None

    @property
    def closed(self) -> bool:
        return self._closed

    def _check(self):
        if self._closed:
            raise TaskIsolationError("replay buffer of a finished task was accessed")

    def add_batch(self, obs, act, rew, next_obs, done, alpha) -> None:
        self._check()
        n = len(rew)
        pos = (self.inserted + np.arange(n)) % self.capacity
        self.obs[pos] = obs
        self.act[pos] = act
        self.rew[pos] = rew
        self.next_obs[pos] = next_obs
        self.done[pos] = done
        self.alpha[pos] = 0.0
        self.alpha[pos, :alpha.shape[1]] = alpha
        self.inserted += n

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        size = self.size
        if size == 0:
            raise InputError("cannot sample from an empty replay buffer")
        return rng.integers(0, size, size=n)

    def batch(self, idx: np.ndarray):
        self._check()
        return (self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx],
                self.done[idx], self.alpha[idx])


@dataclass
class SacState:
    """Trainer state. ``anchors[-1]`` is the trainable actor, earlier rows are frozen."""

    anchors: np.ndarray
    actor_signature: ArchSignature
    critics: list
    targets: list
    log_temp: np.ndarray
    actor_opt: AdamState
    critic_opts: list
    temp_opt: AdamState
    n_updates: int = 0
    history: list = field(default_factory=list)

    @property
    def actor(self) -> ParamVector:
        return ParamVector(self.actor_signature, self.anchors[-1])

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temp[0]))


def new_state(actor: ParamVector, config: SacConfig, rng: np.random.Generator,
              frozen: Optional[np.ndarray] = None) -> SacState:
    """Fresh critics, targets, temperature and optimisers around a given actor."""
    frozen = np.zeros((0, actor.signature.n_params)) if frozen is None else np.atleast_2d(frozen)
    anchors = np.vstack([frozen, actor.values[None, :]])
    csig = config.critic_signature()
    critics = [init_params(csig, rng) for _ in range(2)]
    targets = [c.copy() for c in critics]
    return SacState(
        anchors=anchors,
        actor_signature=actor.signature,
        critics=critics,
        targets=targets,
        log_temp=np.array([math.log(config.init_temperature)]),
        actor_opt=AdamState.create(actor.signature.n_params, config.lr_policy),
        critic_opts=[AdamState.create(csig.n_params, config.lr_critic) for _ in range(2)],
        temp_opt=AdamState.create(1, config.lr_entropy),
    )


# -- policy head -------------------------------------------------------------

def _heads(anchors: np.ndarray, alphas: np.ndarray, layout: np.ndarray, obs: np.ndarray):
    if anchors.shape[0] == 1:
        out, hs = kernels.mlp_forward(anchors[0], layout, obs)
    else:
        out, hs = kernels.mix_forward(anchors, alphas, layout, obs)
    a = envs.ACT_DIM
    return out[:, :a], out[:, a:], hs


def _head_backward(anchors, alphas, layout, hs, dout):
    if anchors.shape[0] == 1:
        grad, _ = kernels.mlp_backward(anchors[0], layout, hs, dout)
        return grad
    grad, _ = kernels.mix_backward(anchors, alphas, layout, hs, dout, anchors.shape[0] - 1)
    return grad


def _log1m_tanh2(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squashed_sample(mean: np.ndarray, log_std: np.ndarray, noise: np.ndarray):
    """Reparameterised tanh-Gaussian draw. Returns ``(action, log_prob, std)``."""
    std = np.exp(log_std)
    u = mean + std * noise
    action = np.tanh(u)
    logp = np.sum(-0.5 * noise * noise - log_std - _HALF_LOG_2PI - _log1m_tanh2(u), axis=1)
    return action, logp, std


def act(params: ParamVector, obs, stochastic: bool = False,
        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Action for one observation or a batch, from an already-combined parameter vector."""
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    ob = np.ascontiguousarray(obs[None, :] if single else obs)
    if ob.shape[1] != params.signature.n_in:
        raise InputError(f"observation width {ob.shape[1]} != {params.signature.n_in}")
    out, _ = kernels.mlp_forward(params.values, params.signature.layout, ob)
    mean = out[:, :envs.ACT_DIM]
    if stochastic:
        if rng is None:
            raise InputError("stochastic actions need an rng")
        log_std = np.clip(out[:, envs.ACT_DIM:], LOG_STD_MIN, LOG_STD_MAX)
        noise = rng.standard_normal(mean.shape)
        action = np.tanh(mean + np.exp(log_std) * noise)
    else:
        action = np.tanh(mean)
    return action[0] if single else action


def critic_input(obs, action, alpha, alpha_max: int) -> np.ndarray:
    obs = np.atleast_2d(obs)
    action = np.atleast_2d(action)
    alpha = np.atleast_2d(alpha)
    if alpha.shape[1] > alpha_max:
        raise InputError(f"alpha length {alpha.shape[1]} exceeds the cap {alpha_max}")
    x = np.zeros((obs.shape[0], obs.shape[1] + action.shape[1] + alpha_max))
    x[:, :obs.shape[1]] = obs
    x[:, obs.shape[1]:obs.shape[1] + action.shape[1]] = action
    x[:, obs.shape[1] + action.shape[1]:obs.shape[1] + action.shape[1] + alpha.shape[1]] = alpha
    return x


def critic_eval(critic: ParamVector, obs, action, alpha) -> np.ndarray | float:
    """Q(s, a, alpha); alpha is zero-padded up to the critic's alpha slots."""
    sig = critic.signature
    alpha_max = sig.n_in - envs.OBS_DIM - envs.ACT_DIM
    x = critic_input(obs, action, alpha, alpha_max)
    if x.shape[1] != sig.n_in:
        raise InputError("critic input width mismatch")
    q, _ = kernels.mlp_forward(critic.values, sig.layout, x)
    q = q[:, 0]
    return float(q[0]) if np.ndim(obs) == 1 else q


# -- one gradient step -------------------------------------------------------

def update(state: SacState, buffer: ReplayBuffer, config: SacConfig, rng: np.random.Generator,
           penalty: Optional[Penalty] = None, critic_only: bool = False) -> dict:
    """One SAC gradient step on a uniformly sampled batch. Mutates ``state``."""
    B = config.batch_size
    if buffer.size < 1:
        raise InputError("replay buffer is empty")
    idx = buffer.sample_indices(rng, B)
    s, a, r, s2, d, al = buffer.batch(idx)
    m = state.n_anchors
    alm = np.ascontiguousarray(al[:, :m])
    anchors = state.anchors
    layout = state.actor_signature.layout
    csig = state.critics[0].signature
    clayout = csig.layout
    n_sa = envs.OBS_DIM + envs.ACT_DIM
    temp = math.exp(state.log_temp[0])

    # critic regression target
    mean2, ls2, _ = _heads(anchors, alm, layout, s2)
    ls2 = np.clip(ls2, LOG_STD_MIN, LOG_STD_MAX)
    a2, logp2, _ = squashed_sample(mean2, ls2, rng.standard_normal(mean2.shape))
    x2 = np.empty((B, csig.n_in))
    x2[:, :envs.OBS_DIM] = s2
    x2[:, envs.OBS_DIM:n_sa] = a2
    x2[:, n_sa:] = al
    qt1, _ = kernels.mlp_forward(state.targets[0].values, clayout, x2)
    qt2, _ = kernels.mlp_forward(state.targets[1].values, clayout, x2)
    y = r + config.discount * (1.0 - d) * (np.minimum(qt1[:, 0], qt2[:, 0]) - temp * logp2)

    x = np.empty((B, csig.n_in))
    x[:, :envs.OBS_DIM] = s
    x[:, envs.OBS_DIM:n_sa] = a
    x[:, n_sa:] = al
    critic_loss = 0.0
    for c, opt in zip(state.critics, state.critic_opts):
        q, hs = kernels.mlp_forward(c.values, clayout, x)
        err = q[:, 0] - y
        critic_loss += float(np.mean(err * err))
        g, _ = kernels.mlp_backward(c.values, clayout, hs, (2.0 / B) * err[:, None])
        adam_step(opt, c.values, g)
    if not math.isfinite(critic_loss):
        raise TrainingFault(f"non-finite critic loss {critic_loss}")
    state.n_updates += 1
    losses = {"critic": critic_loss}

    if not critic_only and state.n_updates % config.policy_update_delay == 0:
        mean, ls_raw, hs_a = _heads(anchors, alm, layout, s)
        ls = np.clip(ls_raw, LOG_STD_MIN, LOG_STD_MAX)
        noise = rng.standard_normal(mean.shape)
        an, logp, std = squashed_sample(mean, ls, noise)
        x[:, envs.OBS_DIM:n_sa] = an
        q1, h1 = kernels.mlp_forward(state.critics[0].values, clayout, x)
        q2, h2 = kernels.mlp_forward(state.critics[1].values, clayout, x)
        first = (q1[:, 0] <= q2[:, 0]).astype(np.float64)[:, None]
        minq = np.minimum(q1[:, 0], q2[:, 0])
        _, dx1 = kernels.mlp_backward(state.critics[0].values, clayout, h1, first, True, False)
        _, dx2 = kernels.mlp_backward(state.critics[1].values, clayout, h2, 1.0 - first, True, False)
        dq_da = (dx1 + dx2)[:, envs.OBS_DIM:n_sa]
        actor_loss = float(np.mean(temp * logp - minq))
        # d log_prob / du = 2 tanh(u); d(-Q)/du = -dQ/da (1 - a^2)
        du = (temp * 2.0 * an - dq_da * (1.0 - an * an)) / B
        dls = (-temp / B + du * std * noise) * ((ls_raw > LOG_STD_MIN) & (ls_raw < LOG_STD_MAX))
        grad = _head_backward(anchors, alm, layout, hs_a, np.ascontiguousarray(np.hstack([du, dls])))
        if penalty is not None:
            pen_loss, pen_grad = penalty(anchors[-1])
            grad = grad + pen_grad
            actor_loss += pen_loss
        if not math.isfinite(actor_loss):
            raise TrainingFault(f"non-finite actor loss {actor_loss}")
        adam_step(state.actor_opt, anchors[-1], grad)

        ent_gap = float(np.mean(logp)) + config.target_entropy
        adam_step(state.temp_opt, state.log_temp, np.array([-ent_gap]))
        losses.update(actor=actor_loss, temperature=-float(state.log_temp[0]) * ent_gap)

    if state.n_updates % config.target_update_delay == 0:
        tau = config.polyak
        for t, c in zip(state.targets, state.critics):
            t.values[:] = (1.0 - tau) * t.values + tau * c.values
    return losses


# -- collection + training on one task ----------------------------------------

def _last_vertex(m: int) -> AlphaSampler:
    def sampler(rng):
        out = np.zeros(m)
        out[-1] = 1.0
        return out
    return sampler


def train_on_task(actor: ParamVector, task: envs.TaskSpec, config: SacConfig,
                  rng: np.random.Generator, alpha_sampler: Optional[AlphaSampler] = None,
                  frozen: Optional[np.ndarray] = None, penalty: Optional[Penalty] = None,
                  budget: Optional[int] = None) -> tuple[SacState, ReplayBuffer]:
    """Run ``budget`` environment interactions on ``task`` with periodic SAC updates.

    ``alpha_sampler`` is called per environment at the start of every
    ``config.segment_length``-step segment and must return weights over all
    anchors (frozen ones first). The input ``actor`` is not modified.
    """
    budget = task.budget if budget is None else int(budget)
    state = new_state(actor.copy(), config, rng, frozen)
    m = state.n_anchors
    if alpha_sampler is None:
        alpha_sampler = _last_vertex(m)
    buffer = ReplayBuffer(min(config.buffer_capacity, max(budget, 1)), alpha_dim=config.alpha_max)
    if budget <= 0:
        return state, buffer

    n_env = config.n_parallel
    venv = envs.PointMassVec(task.env_params, n_env)
    obs = venv.reset(rng)
    alphas = np.zeros((n_env, m))
    layout = state.actor_signature.layout
    steps = 0
    local_t = 0
    credit = 0.0
    try:
        while steps < budget:
            if local_t % config.segment_length == 0:
                for e in range(n_env):
                    alphas[e] = alpha_sampler(rng)
            n = min(n_env, budget - steps)
            if steps < config.warmup_steps:
                actions = rng.uniform(-1.0, 1.0, size=(n_env, envs.ACT_DIM))
            else:
                mean, ls, _ = _heads(state.anchors, alphas, layout, obs)
                ls = np.clip(ls, LOG_STD_MIN, LOG_STD_MAX)
                actions = np.tanh(mean + np.exp(ls) * rng.standard_normal(mean.shape))
            next_obs, reward, done = venv.step(actions)
            buffer.add_batch(obs[:n], actions[:n], config.reward_scaling * reward[:n],
                             next_obs[:n], np.full(n, float(done)), alphas[:n])
            steps += n
            local_t += 1
            obs = venv.reset(rng) if done else next_obs
            if steps > config.warmup_steps:
                credit += n * config.updates_per_env_step
                while credit >= 1.0 and buffer.size >= config.batch_size:
                    update(state, buffer, config, rng, penalty)
                    credit -= 1.0
    finally:
        venv.close()
    return state, buffer


# -- evaluation ---------------------------------------------------------------

def evaluate(params: ParamVector, env_params: envs.EnvParams, n_episodes: int = 32,
             seed=0, per_episode: bool = False):
    """Mean undiscounted return of the deterministic policy over ``n_episodes``."""
    venv = envs.PointMassVec(env_params, n_episodes)
    obs = venv.reset(np.random.default_rng(seed))
    total = np.zeros(n_episodes)
    done = False
    while not done:
        obs, reward, done = venv.step(act(params, obs))
        total += reward
    return total if per_episode else float(total.mean())


def scripted_return(env_params: envs.EnvParams, action=(1.0, 0.0), n_episodes: int = 32, seed=0) -> float:
    """Mean return of a constant-action policy (full throttle by default)."""
    venv = envs.PointMassVec(env_params, n_episodes)
    venv.reset(np.random.default_rng(seed))
    acts = np.tile(np.asarray(action, dtype=np.float64), (n_episodes, 1))
    total = np.zeros(n_episodes)
    done = False
    while not done:
        _, reward, done = venv.step(acts)
        total += reward
    return float(total.mean())
