"""Command-line entry point: ``csprl {run,metrics,landscape,ablate,compare}``.

``run`` writes one directory per seed holding ``checkpoint.cspc`` (the
learner's policies), ``checkpoint.critic.cspc`` (the last task's critics),
``matrix.json``, ``decisions.jsonl`` and ``run.jsonl``, plus ``scenario.json``
and ``config.json`` at the top level. Lists are comma separated; pass negative
values as ``--epsilons=-2,0,0.1``.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import iolog, metrics, scenario as scn
from .baselines import METHODS, MethodConfig
from .errors import CapacityError, CheckpointError, ConfigError, InputError, TaskIsolationError

log = logging.getLogger("csprl")

DEFAULT_EPSILONS = "-2,0,0.1,0.25,0.5,1e18"


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from exc


def _ints(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from exc


def _methods(text: str) -> list:
    names = [x.strip() for x in text.split(",") if x.strip()]
    bad = [n for n in names if n not in METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
    return names


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", required=True,
                   help="scenario JSON file, or an archetype name with optional length (robustness:8)")
    p.add_argument("--budget", type=int, default=None, help="environment steps per task")
    p.add_argument("--seeds", type=_ints, default=None, help="comma-separated seeds")
    p.add_argument("--n-eval", type=int, default=scn.N_EVAL, help="evaluation episodes per record")
    p.add_argument("--no-solo", action="store_true",
                   help="skip the single-task reference runs; metrics then use raw returns")
    p.add_argument("--reg-coef", type=float, default=1.0, help="FT-L2 / EWC coefficient")
    p.add_argument("--refine", action="store_true", help="top-k rollout refinement of the critic's alpha")
    p.add_argument("--refit-updates", type=int, default=0, help="critic refit steps before choosing alphas")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csprl", description="Continual subspace-of-policies RL")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one method over a scenario")
    _add_common(p)
    p.add_argument("--method", choices=METHODS, default="csp")
    p.add_argument("--epsilon", type=float, default=0.1, help="extension threshold")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("metrics", help="summary row over the seeds of a run directory")
    p.add_argument("--runs", required=True, help="directory written by `run`")

    p = sub.add_parser("landscape", help="MC and critic values over a barycentric grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", type=int, required=True, help="task index whose environment is used")
    p.add_argument("--grid-n", type=int, default=iolog.CI_GRID_N)
    p.add_argument("--out", required=True, help="CSV file")
    p.add_argument("--critic", default=None, help="critic sidecar (default: next to the checkpoint)")
    p.add_argument("--mode", choices=("both", "mc", "critic"), default="both")
    p.add_argument("--scenario", default=None, help="scenario giving the task's tweaks")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="CSP over a list of thresholds")
    _add_common(p)
    p.add_argument("--epsilons", type=_floats, default=_floats(DEFAULT_EPSILONS))
    p.add_argument("--out", default=None, help="optional JSON file for the table")

    p = sub.add_parser("compare", help="several methods over one scenario")
    _add_common(p)
    p.add_argument("--methods", type=_methods, default=list(METHODS))
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--out", default=None, help="optional JSON file for the table")
    return parser


def resolve_seeds(explicit: Optional[list], scenario: scn.Scenario) -> list:
    """Explicit seeds win, then ``CSP_SEED``, then the scenario's own seed."""
    if explicit:
        return explicit
    env = os.environ.get("CSP_SEED")
    if env is not None and env.strip():
        try:
            return [int(env)]
        except ValueError as exc:
            raise ConfigError(f"CSP_SEED must be an integer, got {env!r}") from exc
    return [scenario.seed]


def _run_config(args, method: str, epsilon: float = 0.1) -> scn.RunConfig:
    sc = scn.load_scenario(args.scenario, args.budget)
    mc = MethodConfig(method=method, reg_coef=args.reg_coef, epsilon=epsilon, refine=args.refine,
                      refit_updates=args.refit_updates)
    return scn.RunConfig(mc, sc, {}, getattr(args, "out", None), resolve_seeds(args.seeds, sc),
                         args.n_eval, not args.no_solo)


def write_run(out: Path, cfg: scn.RunConfig, result: scn.RunResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(cfg.scenario.to_json() + "\n")
    (out / "config.json").write_text(json.dumps({"method": vars(cfg.method), "seeds": cfg.seeds,
                                                 "n_eval": cfg.n_eval, "solo": cfg.solo},
                                                sort_keys=True, indent=2) + "\n")
    names = [t.name for t in cfg.scenario.tasks]
    for res in result.seeds:
        d = out / f"seed_{res.seed}"
        d.mkdir(exist_ok=True)
        iolog.write_jsonl(d / "run.jsonl", res.events)
        iolog.write_jsonl(d / "decisions.jsonl", iolog.decision_records(res.decisions))
        if not res.ok:
            continue
        refs = res.matrix.reference if res.matrix.reference is not None else [math.nan] * len(names)
        with open(d / "matrix.json", "w") as fh:
            json.dump(iolog.matrix_record(res.matrix, res.model_size), fh, sort_keys=True, indent=1)
            fh.write("\n")
        ckpt_path = d / "checkpoint.cspc"
        iolog.save_checkpoint(ckpt_path, iolog.learner_checkpoint(res.learner, names, refs))
        if res.last_critics:
            iolog.save_checkpoint(iolog.sidecar_path(ckpt_path), iolog.critic_checkpoint(res.last_critics))


def _fmt(pair) -> str:
    mean, std = pair
    return f"{mean:.2f}±{std:.2f}"


def format_row(name: str, summary: dict) -> str:
    return (f"{name:<12} performance {_fmt(summary['performance'])}  size {_fmt(summary['size'])}  "
            f"transfer {_fmt(summary['transfer'])}  forgetting {_fmt(summary['forgetting'])}  "
            f"(seeds={summary['n_seeds']})")


def load_runs(run_dir) -> list:
    """Per-seed metric dicts from a run directory."""
    run_dir = Path(run_dir)
    seeds = sorted(p for p in run_dir.glob("seed_*") if (p / "matrix.json").exists())
    if not seeds:
        raise InputError(f"no finished seeds under {run_dir}")
    rows = []
    for d in seeds:
        m, size = iolog.read_matrix(d / "matrix.json")
        rows.append({"performance": metrics.average_performance(m), "size": size,
                     "forgetting": metrics.forgetting(m),
                     "transfer": metrics.forward_transfer(m) if m.solo is not None else math.nan})
    return rows


def summarize_rows(rows: list) -> dict:
    out = {k: (float(np.mean([r[k] for r in rows])), float(np.std([r[k] for r in rows])))
           for k in ("performance", "size", "transfer", "forgetting")}
    out["n_seeds"] = len(rows)
    return out


def cmd_run(args) -> int:
    cfg = _run_config(args, args.method, args.epsilon)
    result = scn.run(cfg)
    write_run(Path(args.out), cfg, result)
    ok = [s for s in result.seeds if s.ok]
    for s in result.seeds:
        if not s.ok:
            print(f"seed {s.seed} aborted: {s.failed}", file=sys.stderr)
    if ok:
        print(format_row(args.method, scn.summarize(ok)))
    return 0 if ok else 1


def cmd_metrics(args) -> int:
    print(format_row(Path(args.runs).name or "run", summarize_rows(load_runs(args.runs))))
    return 0


def cmd_landscape(args) -> int:
    env_params = None
    if args.scenario:
        env_params = scn.load_scenario(args.scenario).tasks[args.task].env_params
    else:
        sc_file = Path(args.checkpoint).resolve().parent.parent / "scenario.json"
        if sc_file.exists():
            env_params = scn.load_scenario(str(sc_file)).tasks[args.task].env_params
    pts = iolog.export_landscape(args.checkpoint, args.task, args.grid_n, args.out, args.critic,
                                 env_params, args.mode, args.seed)
    print(f"wrote {len(pts)} points to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args, "csp")
    table = scn.ablate_threshold(cfg, args.epsilons)
    print("epsilon      performance  size   replayed_size")
    for run, rep in zip(table["runs"], table["replay"]):
        print(f"{run['epsilon']:<12g} {run['performance']:<12.3f} {run['size']:<6.2f} {rep['size']:.2f}")
    if args.out:
        Path(args.out).write_text(json.dumps(iolog._clean(table), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_compare(args) -> int:
    cfg = _run_config(args, "csp", args.epsilon)
    table = scn.compare(cfg, args.methods)
    for name, summ in table.items():
        print(format_row(name, summ))
    if args.out:
        Path(args.out).write_text(json.dumps(iolog._clean(table), indent=2, sort_keys=True) + "\n")
    return 0


COMMANDS = {"run": cmd_run, "metrics": cmd_metrics, "landscape": cmd_landscape,
            "ablate": cmd_ablate, "compare": cmd_compare}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InputError, CheckpointError, CapacityError, TaskIsolationError,
            OSError, IndexError) as exc:
        print(f"csprl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
