"""Compiled kernels vs their numpy twins.

Times each hot kernel from both backends in one process, then times the
end-to-end cost of SAC updates and environment steps with the backend chosen
at import (``CSPRL_PURE_PYTHON=1`` forces numpy) in separate subprocesses.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from csprl import _kernels_py, diffnet as dn, envs, sac

try:
    from csprl import _kernels
except ImportError:
    _kernels = None

BATCH = 256


def _cases(k, rng):
    """Name -> zero-arg callable for each kernel of module ``k``."""
    cfg = sac.SacConfig()
    sig = cfg.actor_signature()
    layout = sig.layout
    params = dn.init_params(sig, rng).values
    x = rng.normal(size=(BATCH, envs.OBS_DIM))
    _, hs = k.mlp_forward(params, layout, x)
    dy = rng.normal(size=(BATCH, sig.widths[-1]))
    m = 4
    anchors = np.ascontiguousarray(np.stack([dn.init_params(sig, rng).values for _ in range(m)]))
    alphas = np.ascontiguousarray(rng.dirichlet(np.ones(m), size=BATCH))
    _, mhs = k.mix_forward(anchors, alphas, layout, x)
    n_env = 8
    pos, vel = rng.normal(size=(n_env, 2)), rng.normal(size=(n_env, 2))
    act = np.clip(rng.normal(size=(n_env, 2)), -1, 1)
    mask = np.ones(2)
    return {
        "mlp_forward": lambda: k.mlp_forward(params, layout, x),
        "mlp_backward": lambda: k.mlp_backward(params, layout, hs, dy),
        "mix_forward": lambda: k.mix_forward(anchors, alphas, layout, x),
        "mix_backward": lambda: k.mix_backward(anchors, alphas, layout, mhs, dy, m - 1),
        "pointmass_step": lambda: k.pointmass_step(pos, vel, act, 1.0, 1.0, 1.0, 1.0, mask,
                                                    envs.DT, envs.GAIN, envs.GRAVITY[0], envs.GRAVITY[1],
                                                    envs.FRICTION, envs.CTRL_COST),
    }


def time_kernels(repeat: int) -> dict:
    out = {}
    mods = {"python": _kernels_py}
    if _kernels is not None:
        mods["cython"] = _kernels
    for name, k in mods.items():
        for case, fn in _cases(k, np.random.default_rng(0)).items():
            t = min(timeit.repeat(fn, number=repeat, repeat=3)) / repeat
            out.setdefault(case, {})[name] = t
    return out


_E2E = """
import time, numpy as np
from csprl import BACKEND, envs, sac, subspace as sp
cfg = sac.SacConfig()
rng = np.random.default_rng(0)
actor = sac.init_params(cfg.actor_signature(), rng)
state = sac.new_state(actor, cfg, rng, np.stack([actor.values] * 2))
buf = sac.ReplayBuffer(4096)
n = 4096
al = np.tile(sp.pad(np.ones(3) / 3, cfg.alpha_max), (n, 1))
buf.add_batch(rng.normal(size=(n, 4)), rng.uniform(-1, 1, (n, 2)), rng.normal(size=n),
              rng.normal(size=(n, 4)), np.zeros(n), al)
sac.update(state, buf, cfg, rng)
t = time.perf_counter()
for _ in range({updates}):
    sac.update(state, buf, cfg, rng)
upd = (time.perf_counter() - t) / {updates}
p = envs.EnvParams()
t = time.perf_counter()
sac.evaluate(actor, p, 8, 0)
ev = time.perf_counter() - t
print(BACKEND, upd, ev)
"""


def time_end_to_end(updates: int) -> dict:
    out = {}
    for pure in ("1", "0"):
        env = {**os.environ, "CSPRL_PURE_PYTHON": pure}
        res = subprocess.run([sys.executable, "-c", _E2E.format(updates=updates)], env=env,
                             capture_output=True, text=True, check=True)
        backend, upd, ev = res.stdout.split()
        out[backend] = {"sac_update": float(upd), "evaluate_8_episodes": float(ev)}
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200, help="calls per timing (default 200)")
    ap.add_argument("--updates", type=int, default=100, help="SAC updates timed end to end")
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)
    kern = time_kernels(args.repeat)
    print(f"{'kernel':<16}{'python (us)':>14}{'cython (us)':>14}{'speedup':>10}")
    for case, row in kern.items():
        py, cy = row["python"] * 1e6, row.get("cython", float("nan")) * 1e6
        print(f"{case:<16}{py:>14.1f}{cy:>14.1f}{py / cy:>10.2f}")
    e2e = time_end_to_end(args.updates)
    print()
    print(f"{'end to end':<22}" + "".join(f"{b:>12}" for b in e2e))
    for key in ("sac_update", "evaluate_8_episodes"):
        print(f"{key + ' (ms)':<22}" + "".join(f"{e2e[b][key] * 1e3:>12.2f}" for b in e2e))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": kern, "end_to_end": e2e}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
