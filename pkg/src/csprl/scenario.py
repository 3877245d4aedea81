"""Task sequences and the sequential continual-learning protocol.

A run trains one learner on the tasks of a scenario in order. After each task
the learner's policy for every task seen so far is evaluated on that task's
fixed evaluation starts, which fills one column of the performance matrix.
Finished tasks' buffers and environments are poisoned so nothing can read them
again. All randomness comes from ``default_rng((seed, stream, task))``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import envs, metrics, sac
from .baselines import CSP, MethodConfig, make_learner
from .errors import ConfigError, TrainingFault

log = logging.getLogger(__name__)

ARCHETYPES = ("forgetting", "transfer", "robustness", "compositional", "custom")
LOOPS = {
    "robustness": ["normal", "inverted", "normal", "inverted"],
    "compositional": ["moon", "defective_module", "heavy", "moon+defective_module"],
    "forgetting": ["normal", "inverted", "hugegravity", "hugegravity+inverted"],
    "transfer": ["normal", "defective_sensor", "inverted+defective_sensor", "inverted"],
}
STREAM_TRAIN = 0
STREAM_EVAL = 1
N_EVAL = 32


@dataclass
class Scenario:
    name: str
    tasks: list
    archetype: str = "custom"
    seed: int = 0

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("a scenario needs at least one task")
        if self.archetype not in ARCHETYPES:
            raise ConfigError(f"unknown archetype {self.archetype!r}")

    def __len__(self) -> int:
        return len(self.tasks)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "archetype": self.archetype,
            "tasks": [{"name": t.name, "tweaks": t.env_params.tweaks(), "budget": t.budget}
                      for t in self.tasks],
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if not isinstance(d, dict):
            raise ConfigError("scenario document must be an object")
        extra = set(d) - {"name", "archetype", "tasks", "seed"}
        if extra:
            raise ConfigError(f"unknown scenario keys: {sorted(extra)}")
        if "name" not in d or "tasks" not in d:
            raise ConfigError("scenario needs 'name' and 'tasks'")
        tasks = []
        for t in d["tasks"]:
            if not isinstance(t, dict):
                raise ConfigError("each task must be an object")
            extra = set(t) - {"name", "tweaks", "budget"}
            if extra:
                raise ConfigError(f"unknown task keys: {sorted(extra)}")
            if "name" not in t:
                raise ConfigError("each task needs a name")
            tasks.append(envs.make_task(t["name"], t.get("tweaks"), t.get("budget", 20_000)))
        return cls(d["name"], tasks, d.get("archetype", "custom"), int(d.get("seed", 0)))

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def __eq__(self, other) -> bool:
        return isinstance(other, Scenario) and self.to_dict() == other.to_dict()


def build_scenario(archetype: str, length: int = 4, budget: int = 20_000, seed: int = 0) -> Scenario:
    """One of the four archetypes; length 8 repeats the 4-task loop twice."""
    if archetype not in LOOPS:
        raise ConfigError(f"unknown archetype {archetype!r}; choose from {sorted(LOOPS)}")
    if length not in (4, 8):
        raise ConfigError("scenario length must be 4 or 8")
    names = LOOPS[archetype] * (length // 4)
    tasks = [envs.make_task(n, budget=budget) for n in names]
    return Scenario(f"{archetype}{length}", tasks, archetype, seed)


def load_scenario(spec: str, budget: Optional[int] = None) -> Scenario:
    """A scenario file path, or ``archetype`` / ``archetype:length`` for a built-in."""
    name, _, n = spec.partition(":")
    if name in LOOPS:
        return build_scenario(name, int(n) if n else 4, budget or 20_000)
    with open(spec) as fh:
        sc = Scenario.from_json(fh.read())
    if budget is not None:
        sc = Scenario(sc.name, [envs.TaskSpec(t.name, t.env_params, budget) for t in sc.tasks],
                      sc.archetype, sc.seed)
    return sc


@dataclass
class RunConfig:
    method: MethodConfig
    scenario: Scenario
    sac_overrides: dict = field(default_factory=dict)
    out_dir: Optional[str] = None
    seeds: list = field(default_factory=lambda: [0])
    n_eval: int = N_EVAL
    solo: bool = True

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.n_eval < 1:
            raise ConfigError("n_eval must be >= 1")

    def sac_config(self) -> sac.SacConfig:
        try:
            return sac.SacConfig(**self.sac_overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class SeedResult:
    seed: int
    matrix: Optional[metrics.PerformanceMatrix]
    records: list
    decisions: list
    events: list
    model_size: float
    learner: object = None
    last_critics: Optional[list] = None
    failed: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.failed is None


@dataclass
class RunResult:
    config: RunConfig
    seeds: list

    def summary(self) -> dict:
        return summarize([s for s in self.seeds if s.ok])


def train_rng(seed: int, task: int) -> np.random.Generator:
    return np.random.default_rng((seed, STREAM_TRAIN, task))


def eval_seed(seed: int, task: int) -> tuple:
    return (seed, STREAM_EVAL, task)


def solo_returns(scenario: Scenario, config: sac.SacConfig, seed: int, n_eval: int = N_EVAL) -> np.ndarray:
    """Single-task SAC return per task, seeded exactly like the sequential run's task."""
    out = np.empty(len(scenario))
    for i, task in enumerate(scenario.tasks):
        rng = train_rng(seed, i)
        actor = sac.init_params(config.actor_signature(), rng)
        state, buffer = sac.train_on_task(actor, task, config, rng)
        buffer.close()
        out[i] = sac.evaluate(state.actor, task.env_params, n_eval, eval_seed(seed, i))
    return out


def run_seed(cfg: RunConfig, seed: int, reference: Optional[np.ndarray] = None) -> SeedResult:
    sc = cfg.scenario
    scfg = cfg.sac_config()
    learner = make_learner(MethodConfig(**vars(cfg.method)), scfg)
    n = len(sc)
    records, events, decisions = [], [], []
    last_critics = None
    try:
        for j, task in enumerate(sc.tasks):
            events.append({"event": "task_start", "seed": seed, "task": j, "name": task.name})
            result = learner.learn_task(task, train_rng(seed, j))
            result.buffer.close()
            last_critics = result.extra.get("critics") or result.state.critics
            if result.decision is not None:
                d = result.decision
                decisions.append(d)
                events.append({"event": "decision", "seed": seed, "task": j, "w_new": d.w_new,
                               "w_old": d.w_old, "epsilon": d.epsilon, "extended": d.extended})
            for i in range(j + 1):
                ret = sac.evaluate(learner.policy(i), sc.tasks[i].env_params, cfg.n_eval, eval_seed(seed, i))
                rec = metrics.EvalRecord(i, j, ret, cfg.n_eval, seed)
                records.append(rec)
                events.append({"event": "eval", "seed": seed, "task": i, "stage": j,
                               "mean_return": ret, "n_eval": cfg.n_eval})
            events.append({"event": "task_end", "seed": seed, "task": j, "model_size": learner.model_size()})
    except TrainingFault as exc:
        log.error("seed %s aborted: %s", seed, exc)
        events.append({"event": "fault", "seed": seed, "message": str(exc)})
        return SeedResult(seed, None, records, decisions, events, math.nan, learner, None, str(exc))
    solo = None
    if reference is not None:
        solo = reference
        for i in range(n):
            records.append(metrics.EvalRecord(i, metrics.SOLO, float(solo[i]), cfg.n_eval, seed))
            events.append({"event": "eval", "seed": seed, "task": i, "stage": metrics.SOLO,
                           "mean_return": float(solo[i]), "n_eval": cfg.n_eval})
    matrix = metrics.PerformanceMatrix.from_records(records, n, reference)
    return SeedResult(seed, matrix, records, decisions, events, learner.model_size(), learner, last_critics)


def run(cfg: RunConfig) -> RunResult:
    """Sequential protocol for every seed; a training fault aborts only its own seed."""
    results = []
    scfg = cfg.sac_config()
    for seed in cfg.seeds:
        reference = None
        if cfg.solo:
            if cfg.method.method == "sacn":
                # SAC-N's sequential runs are seeded like the solo runs, so they coincide
                res = run_seed(cfg, seed)
                if res.ok:
                    reference = np.diag(res.matrix.perf).copy()
                    res = _attach_reference(res, reference, cfg.n_eval)
                results.append(res)
                continue
            try:
                reference = solo_returns(cfg.scenario, scfg, seed, cfg.n_eval)
            except TrainingFault as exc:
                results.append(SeedResult(seed, None, [], [], [{"event": "fault", "seed": seed,
                                                                "message": str(exc)}],
                                          math.nan, None, None, str(exc)))
                continue
        results.append(run_seed(cfg, seed, reference))
    return RunResult(cfg, results)


def _attach_reference(res: SeedResult, reference: np.ndarray, n_eval: int) -> SeedResult:
    n = len(reference)
    for i in range(n):
        res.records.append(metrics.EvalRecord(i, metrics.SOLO, float(reference[i]), n_eval, res.seed))
        res.events.append({"event": "eval", "seed": res.seed, "task": i, "stage": metrics.SOLO,
                           "mean_return": float(reference[i]), "n_eval": n_eval})
    res.matrix = metrics.PerformanceMatrix.from_records(res.records, n, reference)
    return res


def seed_metrics(res: SeedResult) -> dict:
    m = res.matrix
    out = {"performance": metrics.average_performance(m), "size": res.model_size,
           "forgetting": metrics.forgetting(m)}
    out["transfer"] = metrics.forward_transfer(m) if m.solo is not None else math.nan
    return out


def summarize(seeds: list) -> dict:
    """Mean and std over seeds of performance, model size, transfer and forgetting."""
    rows = [seed_metrics(s) for s in seeds]
    out = {}
    for key in ("performance", "size", "transfer", "forgetting"):
        vals = np.array([r[key] for r in rows]) if rows else np.array([math.nan])
        out[key] = (float(np.mean(vals)), float(np.std(vals)))
    out["n_seeds"] = len(rows)
    return out


def ablate_threshold(cfg: RunConfig, epsilons: list) -> dict:
    """Run CSP at each threshold and replay the first run's decision logs across all of them."""
    if not epsilons:
        raise ConfigError("need at least one epsilon")
    rows = []
    base_logs = None
    for eps in epsilons:
        mc = MethodConfig(**{**vars(cfg.method), "method": "csp", "epsilon": float(eps)})
        res = run(RunConfig(mc, cfg.scenario, cfg.sac_overrides, cfg.out_dir, cfg.seeds, cfg.n_eval, cfg.solo))
        ok = [s for s in res.seeds if s.ok]
        if base_logs is None:
            base_logs = [s.decisions for s in ok]
        summ = summarize(ok)
        rows.append({"epsilon": float(eps), "performance": summ["performance"][0], "size": summ["size"][0]})
    n_tasks = len(cfg.scenario)
    replay = []
    for eps in epsilons:
        sizes = [metrics.growing_factor(lg, [eps])[0][1] * n_tasks for lg in base_logs]
        replay.append({"epsilon": float(eps), "size": float(np.mean(sizes)) if sizes else math.nan})
    logs = [_decision_rows(lg) for lg in base_logs]
    return {"runs": rows, "replay": replay, "logs": logs}


def _decision_rows(log: list) -> list:
    return [{"w_new": d.w_new, "w_old": d.w_old, "epsilon": d.epsilon, "extended": d.extended} for d in log]


def compare(cfg: RunConfig, methods: list) -> dict:
    """Table-style summary per method on one scenario."""
    table = {}
    for name in methods:
        mc = MethodConfig(**{**vars(cfg.method), "method": name})
        if name == "csp_linear":
            mc.epsilon = -2.0
        res = run(RunConfig(mc, cfg.scenario, cfg.sac_overrides, cfg.out_dir, cfg.seeds, cfg.n_eval, cfg.solo))
        table[name] = res.summary()
    return table


def is_csp(learner) -> bool:
    return isinstance(learner, CSP)
