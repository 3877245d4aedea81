from __future__ import annotations

import json

import numpy as np
import pytest

from csprl import envs, metrics as mt, scenario as scn
from csprl.baselines import MethodConfig
from csprl.errors import ConfigError, TaskIsolationError

TINY = {"hidden": (8,), "warmup_steps": 200, "batch_size": 32}


def test_builders():
    rob = scn.build_scenario("robustness", 4)
    assert [t.name for t in rob.tasks] == ["normal", "inverted", "normal", "inverted"]
    comp = scn.build_scenario("compositional", 4)
    t1, t2, last = comp.tasks[0].env_params, comp.tasks[1].env_params, comp.tasks[3].env_params
    assert last.tweaks() == {**t1.tweaks(), **t2.tweaks()}
    for arch in ("forgetting", "transfer", "robustness", "compositional"):
        four, eight = scn.build_scenario(arch, 4), scn.build_scenario(arch, 8)
        assert [t.name for t in eight.tasks] == [t.name for t in four.tasks] * 2
    with pytest.raises(ConfigError):
        scn.build_scenario("chaos", 4)
    with pytest.raises(ConfigError):
        scn.build_scenario("robustness", 5)


def test_json_round_trip_and_strict_keys():
    sc = scn.build_scenario("transfer", 8, budget=1234, seed=3)
    assert scn.Scenario.from_json(sc.to_json()) == sc
    doc = json.loads(sc.to_json())
    doc["colour"] = 1
    with pytest.raises(ConfigError):
        scn.Scenario.from_dict(doc)
    doc = json.loads(sc.to_json())
    doc["tasks"][0]["speed"] = 2
    with pytest.raises(ConfigError):
        scn.Scenario.from_dict(doc)
    doc = json.loads(sc.to_json())
    doc["tasks"][0]["budget"] = 0
    with pytest.raises(ConfigError):
        scn.Scenario.from_dict(doc)
    with pytest.raises(ConfigError):
        scn.Scenario.from_json("{not json")
    with pytest.raises(ConfigError):
        scn.Scenario("empty", [])


def test_custom_tweaks_survive_round_trip():
    sc = scn.Scenario("c", [envs.make_task("odd", {"mass": 2.5, "mask_seed": 4, "obs_mask_frac": 0.25}, 50)])
    back = scn.Scenario.from_json(sc.to_json())
    assert back.tasks[0].env_params == sc.tasks[0].env_params


def _cfg(method, names, budget=300, seeds=(0,), solo=True, **mc):
    tasks = [envs.make_task(n, budget=budget) for n in names]
    return scn.RunConfig(MethodConfig(method, **mc), scn.Scenario("t", tasks), TINY, None, list(seeds), 4, solo)


def test_single_task_run():
    res = scn.run(_cfg("ft1", ["normal"]))
    s = res.seeds[0]
    assert s.matrix.perf.shape == (1, 1)
    assert mt.forgetting(s.matrix) == 0.0
    assert mt.forward_transfer(s.matrix) == 0.0
    assert mt.average_performance(s.matrix) == 1.0


def test_sacn_is_its_own_reference():
    res = scn.run(_cfg("sacn", ["normal", "moon"]))
    m = res.seeds[0].matrix
    assert mt.average_performance(m) == 1.0
    assert mt.forgetting(m) == 0.0 and mt.forward_transfer(m) == 0.0


def test_solo_column_equals_sacn_diagonal():
    a = scn.run(_cfg("ft1", ["normal", "moon"])).seeds[0].matrix
    b = scn.run(_cfg("sacn", ["normal", "moon"])).seeds[0].matrix
    assert np.array_equal(a.solo, np.diag(b.perf))


def test_run_is_deterministic_and_isolated():
    cfg = _cfg("csp", ["normal", "inverted"], solo=False)
    r1, r2 = scn.run(cfg).seeds[0], scn.run(cfg).seeds[0]
    assert r1.events == r2.events
    assert any(e["event"] == "decision" for e in r1.events)
    assert r1.matrix.perf.shape == (2, 2) and np.isnan(r1.matrix.perf[1, 0])


def test_buffers_are_poisoned(monkeypatch):
    seen = []
    real = scn.make_learner

    def spy(*a, **k):
        learner = real(*a, **k)
        inner = learner.learn_task

        def wrapped(task, rng):
            res = inner(task, rng)
            seen.append(res.buffer)
            return res
        learner.learn_task = wrapped
        return learner
    monkeypatch.setattr(scn, "make_learner", spy)
    scn.run(_cfg("ft1", ["normal", "moon"], solo=False))
    assert len(seen) == 2
    for buf in seen:
        with pytest.raises(TaskIsolationError):
            buf.batch(np.array([0]))


def test_fault_aborts_only_that_seed(monkeypatch):
    from csprl.errors import TrainingFault
    real = scn.sac.train_on_task

    def flaky(actor, task, config, rng, **kw):
        if task.name == "moon" and flaky.seed == 1:
            raise TrainingFault("boom")
        return real(actor, task, config, rng, **kw)
    flaky.seed = None
    real_seed = scn.run_seed

    def run_seed(cfg, seed, reference=None):
        flaky.seed = seed
        return real_seed(cfg, seed, reference)
    monkeypatch.setattr(scn.sac, "train_on_task", flaky)
    monkeypatch.setattr(scn, "run_seed", run_seed)
    res = scn.run(_cfg("ft1", ["normal", "moon"], seeds=(0, 1), solo=False))
    assert res.seeds[0].ok and not res.seeds[1].ok
    assert res.seeds[1].events[-1]["event"] == "fault"
    assert res.summary()["n_seeds"] == 1


def test_ablation_limits_and_replay_monotone():
    cfg = _cfg("csp", ["normal", "inverted", "moon"], solo=False)
    table = scn.ablate_threshold(cfg, [-2.0, 0.0, 0.1, 1e18])
    runs = {r["epsilon"]: r for r in table["runs"]}
    assert runs[-2.0]["size"] <= 3 and runs[1e18]["size"] == 1.0
    sizes = [r["size"] for r in table["replay"]]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))
    assert sizes[-1] == 1.0
