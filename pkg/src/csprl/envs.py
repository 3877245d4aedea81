"""Parameterised 2-D point-mass environment family.

The agent pushes a unit point mass along ``+x`` against a gravity-like drag
along ``-x`` and viscous friction; reward is forward velocity minus a small
control cost. Task variants tweak mass, gravity, friction, action sign and
mask observation/action channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import numpy as np

from ._backend import kernels
from .errors import ConfigError, InputError, TaskIsolationError

OBS_DIM = 4
ACT_DIM = 2
HORIZON = 200
DT = 0.05
GAIN = 5.0
GRAVITY = (-0.5, 0.0)
FRICTION = 0.5
CTRL_COST = 0.05
INIT_VEL = 0.1


def _n_masked(frac: float, n: int) -> int:
    return int(math.floor(frac * n + 0.5))


@dataclass(frozen=True)
class EnvParams:
    mass: float = 1.0
    gravity_mult: float = 1.0
    friction_mult: float = 1.0
    action_coeff: float = 1.0
    obs_mask_frac: float = 0.0
    act_mask_frac: float = 0.0
    mask_seed: int = 0

    def __post_init__(self):
        if not (self.mass > 0 and math.isfinite(self.mass)):
            raise ConfigError(f"mass must be positive, got {self.mass}")
        if not 0.15 <= self.gravity_mult <= 1.5:
            raise ConfigError(f"gravity_mult {self.gravity_mult} outside [0.15, 1.5]")
        if not 0.4 <= self.friction_mult <= 1.5:
            raise ConfigError(f"friction_mult {self.friction_mult} outside [0.4, 1.5]")
        if self.action_coeff not in (1.0, -1.0):
            raise ConfigError(f"action_coeff must be +1 or -1, got {self.action_coeff}")
        if not 0.0 <= self.obs_mask_frac <= 0.8:
            raise ConfigError(f"obs_mask_frac {self.obs_mask_frac} outside [0, 0.8]")
        if not 0.0 <= self.act_mask_frac <= 0.75:
            raise ConfigError(f"act_mask_frac {self.act_mask_frac} outside [0, 0.75]")

    @cached_property
    def _masks(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.mask_seed)
        obs_order = rng.permutation(OBS_DIM)
        act_order = rng.permutation(ACT_DIM)
        obs_mask = np.ones(OBS_DIM)
        obs_mask[obs_order[:_n_masked(self.obs_mask_frac, OBS_DIM)]] = 0.0
        act_mask = np.ones(ACT_DIM)
        act_mask[act_order[:_n_masked(self.act_mask_frac, ACT_DIM)]] = 0.0
        return obs_mask, act_mask

    @property
    def obs_mask(self) -> np.ndarray:
        return self._masks[0].copy()

    @property
    def act_mask(self) -> np.ndarray:
        return self._masks[1].copy()

    def tweaks(self) -> dict:
        """Fields that differ from the base parameters."""
        base = EnvParams()
        return {f.name: getattr(self, f.name) for f in fields(self)
                if getattr(self, f.name) != getattr(base, f.name)}


@dataclass
class EnvState:
    position: np.ndarray
    velocity: np.ndarray
    step_index: int = 0


@dataclass(frozen=True)
class TaskSpec:
    name: str
    env_params: EnvParams = field(default_factory=EnvParams)
    budget: int = 20_000

    def __post_init__(self):
        if self.budget <= 0:
            raise ConfigError(f"task budget must be positive, got {self.budget}")


def observe(params: EnvParams, position: np.ndarray, velocity: np.ndarray) -> np.ndarray:
    return params._masks[0] * np.concatenate([position, velocity], axis=-1)


def reset(params: EnvParams, seed) -> tuple[EnvState, np.ndarray]:
    rng = np.random.default_rng(seed)
    state = EnvState(np.zeros(2), rng.uniform(-INIT_VEL, INIT_VEL, size=2), 0)
    return state, observe(params, state.position, state.velocity)


def _physics(params: EnvParams, pos, vel, action):
    obs_mask, act_mask = params._masks
    return kernels.pointmass_step(
        pos, vel, action, params.mass, params.gravity_mult, params.friction_mult,
        params.action_coeff, act_mask, DT, GAIN, GRAVITY[0], GRAVITY[1], FRICTION, CTRL_COST,
    )


def step(state: EnvState, action, params: EnvParams):
    """One transition. Returns ``(next_state, observation, reward, done)``."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (ACT_DIM,) or not np.all(np.isfinite(action)):
        raise InputError(f"action must be a finite {ACT_DIM}-vector, got {action!r}")
    a = np.clip(action, -1.0, 1.0)[None, :]
    pos, vel, rew = _physics(params, state.position[None, :], state.velocity[None, :], a)
    nxt = EnvState(pos[0], vel[0], state.step_index + 1)
    return nxt, observe(params, nxt.position, nxt.velocity), float(rew[0]), nxt.step_index >= HORIZON


class PointMassVec:
    """``n`` lock-stepped copies of one task; episodes start and end together."""

    def __init__(self, params: EnvParams, n: int):
        self.params = params
        self.n = n
        self.position = np.zeros((n, 2))
        self.velocity = np.zeros((n, 2))
        self.step_index = 0
        self._closed = False

    def close(self) -> None:
        self._closed = True

    def _check(self):
        if self._closed:
            raise TaskIsolationError("environment of a finished task was accessed")

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._check()
        self.position = np.zeros((self.n, 2))
        self.velocity = rng.uniform(-INIT_VEL, INIT_VEL, size=(self.n, 2))
        self.step_index = 0
        return observe(self.params, self.position, self.velocity)

    def step(self, actions: np.ndarray):
        self._check()
        if not np.all(np.isfinite(actions)):
            raise InputError("non-finite action")
        a = np.clip(actions, -1.0, 1.0)
        self.position, self.velocity, reward = _physics(self.params, self.position, self.velocity, a)
        self.step_index += 1
        done = self.step_index >= HORIZON
        return observe(self.params, self.position, self.velocity), reward, done


def velocity_bound(params: EnvParams) -> float:
    """Largest reachable ``|v_x|`` from an initial speed of at most ``INIT_VEL``.

    The update is a contraction towards the steady state ``drive / (friction c0)``
    so ``|v|`` never exceeds the larger of the start speed and that fixed point.
    """
    drive = abs(params.gravity_mult * GRAVITY[0]) + GAIN / params.mass
    return max(INIT_VEL, drive / (params.friction_mult * FRICTION))


PRESETS: dict[str, dict] = {
    "normal": {},
    "moon": {"gravity_mult": 0.15},
    "hugegravity": {"gravity_mult": 1.5},
    "rainfall": {"friction_mult": 0.4},
    "heavy": {"mass": 1.5},
    "tinyaction": {"mass": 3.0},
    "inverted": {"action_coeff": -1.0},
    "defective_sensor": {"obs_mask_frac": 0.5},
    "defective_module": {"act_mask_frac": 0.5},
}


def compose(*tweak_sets: dict) -> dict:
    """Field union of several tweak sets; conflicting values are an error."""
    out: dict = {}
    for tw in tweak_sets:
        for k, v in tw.items():
            if k in out and out[k] != v:
                raise ConfigError(f"conflicting values for {k}: {out[k]} vs {v}")
            out[k] = v
    return out


def resolve_preset(name: str) -> dict:
    """Tweaks for a preset name; ``a+b`` composes presets ``a`` and ``b``."""
    parts = name.split("+")
    missing = [p for p in parts if p not in PRESETS]
    if missing:
        raise ConfigError(f"unknown task preset(s): {missing}")
    return compose(*(PRESETS[p] for p in parts))


def make_task(name: str, tweaks: dict | None = None, budget: int = 20_000) -> TaskSpec:
    """Build a task. Without explicit ``tweaks`` the name is looked up as a preset."""
    if tweaks is None:
        tweaks = resolve_preset(name)
    names = {f.name for f in fields(EnvParams)}
    unknown = set(tweaks) - names
    if unknown:
        raise ConfigError(f"unknown tweak(s): {sorted(unknown)}")
    try:
        params = replace(EnvParams(), **tweaks)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return TaskSpec(name=name, env_params=params, budget=int(budget))
