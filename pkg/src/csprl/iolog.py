"""Checkpoints, run logs and the barycentric landscape exporter.

Checkpoint layout, all integers unsigned 32-bit and all reals IEEE-754
doubles, little-endian throughout::

    b"CSPC" | version | n_widths | widths... | activation codes (u8 each) |
    alpha_max | m | m * P anchor values | N | N * m alpha values |
    N * (name length | utf-8 name | reference)

Loading checks every declared length against the payload, rejects trailing
bytes and validates each alpha row on the simplex, so a file either loads
completely or raises :class:`CheckpointError` naming the byte offset.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import envs, sac, subspace as sp
from .baselines import CSP, FineTune, PerTask
from .diffnet import ACTIVATION_NAMES, ACTIVATIONS, ArchSignature, ParamVector
from .errors import CheckpointError, InputError

MAGIC = b"CSPC"
VERSION = 1
MC_ROLLOUTS = 10
CRITIC_PAIRS = 1024
RANDOM_STEPS = 1024
RANDOM_ENVS = 8
PAPER_GRID_N = 127
CI_GRID_N = 8


@dataclass
class Checkpoint:
    subspace: sp.Subspace
    registry: sp.PolicyRegistry

    @property
    def names(self) -> list:
        return [e.name for e in self.registry.entries]


# -- binary format -------------------------------------------------------------

def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    sub, reg = ckpt.subspace, ckpt.registry
    sig = sub.signature
    m = sub.n_anchors
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(sig.widths))]
    parts.append(struct.pack(f"<{len(sig.widths)}I", *sig.widths))
    parts.append(bytes(ACTIVATIONS[a] for a in sig.activations))
    parts.append(struct.pack("<II", sub.alpha_max, m))
    parts.append(sub.anchors.astype("<f8").tobytes())
    parts.append(struct.pack("<I", len(reg)))
    for e in reg.entries:
        a = np.asarray(e.alpha, dtype=np.float64)
        if a.shape != (m,):
            raise InputError(f"stored alpha for {e.name!r} has length {a.shape}, expected {m}")
        parts.append(a.astype("<f8").tobytes())
    for e in reg.entries:
        name = e.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name + struct.pack("<d", e.reference))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left",
                                  self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, n: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").astype(np.float64)


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint", 0)
    at = r.pos
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", at)
    at = r.pos
    n_widths = r.u32("width count")
    if n_widths < 2:
        raise CheckpointError(f"width count {n_widths} < 2", at)
    at = r.pos
    widths = struct.unpack(f"<{n_widths}I", r.take(4 * n_widths, "widths"))
    if any(w == 0 for w in widths):
        raise CheckpointError("zero layer width", at)
    at = r.pos
    codes = r.take(n_widths - 1, "activation codes")
    if any(c not in ACTIVATION_NAMES for c in codes):
        raise CheckpointError("unknown activation code", at)
    sig = ArchSignature(widths, tuple(ACTIVATION_NAMES[c] for c in codes))
    at = r.pos
    alpha_max = r.u32("alpha cap")
    at_m = r.pos
    m = r.u32("anchor count")
    if not 1 <= m <= alpha_max:
        raise CheckpointError(f"anchor count {m} outside [1, {alpha_max}]", at_m)
    anchors = r.f64(m * sig.n_params, "anchors").reshape(m, sig.n_params)
    n = r.u32("task count")
    alphas = []
    for i in range(n):
        at = r.pos
        a = r.f64(m, f"alpha row {i}")
        try:
            sp.check_alpha(a, m)
        except InputError as exc:
            raise CheckpointError(f"alpha row {i} invalid: {exc}", at) from None
        alphas.append(a)
    entries = []
    for i in range(n):
        at = r.pos
        length = r.u32(f"name length {i}")
        raw = r.take(length, f"name {i}")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"name {i} is not utf-8", at) from None
        ref = float(r.f64(1, f"reference {i}")[0])
        entries.append(sp.RegistryEntry(name, alphas[i], ref))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes", r.pos)
    return Checkpoint(sp.Subspace(sig, anchors, False, alpha_max), sp.PolicyRegistry(entries))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def critic_checkpoint(critics: list) -> Checkpoint:
    """Twin critics stored as a subspace of their own, with no task rows."""
    sig = critics[0].signature
    return Checkpoint(sp.Subspace(sig, np.stack([c.values for c in critics])), sp.PolicyRegistry())


def critics_from(ckpt: Checkpoint) -> list:
    return [ckpt.subspace.anchor(i) for i in range(ckpt.subspace.n_anchors)]


def learner_checkpoint(learner, names: list, references: Optional[Iterable[float]] = None) -> Checkpoint:
    """Any learner's final state as anchors plus one alpha row per task.

    CSP stores its subspace; per-task methods store one anchor per task with
    one-hot rows; finetuning methods store their single actor.
    """
    refs = list(references) if references is not None else [math.nan] * len(names)
    if isinstance(learner, CSP):
        sub = learner.subspace.copy()
        rows = [e.alpha for e in learner.registry.padded(sub.n_anchors).entries]
    elif isinstance(learner, PerTask):
        sig = learner.models[0].signature
        sub = sp.Subspace(sig, np.stack([p.values for p in learner.models]),
                          alpha_max=max(sp.DEFAULT_ALPHA_MAX, len(learner.models)))
        rows = [sp.vertex(len(learner.models), i) for i in range(len(learner.models))]
    elif isinstance(learner, FineTune):
        sub = sp.Subspace.single(learner.actor)
        rows = [np.ones(1) for _ in names]
    else:
        raise InputError(f"cannot checkpoint {type(learner).__name__}")
    if len(rows) != len(names):
        raise InputError("task names do not match the learner's task count")
    reg = sp.PolicyRegistry([sp.RegistryEntry(n, np.array(a, dtype=np.float64), float(r))
                             for n, a, r in zip(names, rows, refs)])
    return Checkpoint(sub, reg)


# -- run logs ------------------------------------------------------------------

def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, (np.floating,)):
        return _clean(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_clean(v) for v in value]
    return value


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_clean(rec), sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise InputError(f"{path}: line {i + 1} is not valid JSON") from exc
    return out


def decision_records(decisions: list) -> list:
    return [{"w_new": d.w_new, "w_old": d.w_old, "epsilon": d.epsilon, "extended": d.extended}
            for d in decisions]


def read_decisions(path) -> list:
    return [sp.GrowDecision(float(r["w_new"]), float(r["w_old"]), float(r["epsilon"]), bool(r["extended"]))
            for r in read_jsonl(path)]


def _nan(x):
    return math.nan if x is None else float(x)


def matrix_record(matrix, model_size: float) -> dict:
    return _clean({"perf": matrix.perf.tolist(),
                   "solo": None if matrix.solo is None else matrix.solo.tolist(),
                   "reference": None if matrix.reference is None else matrix.reference.tolist(),
                   "model_size": model_size})


def read_matrix(path):
    from .metrics import PerformanceMatrix
    with open(path) as fh:
        doc = json.load(fh)
    perf = np.array([[_nan(x) for x in row] for row in doc["perf"]])
    solo = None if doc.get("solo") is None else np.array([_nan(x) for x in doc["solo"]])
    ref = None if doc.get("reference") is None else np.array([_nan(x) for x in doc["reference"]])
    return PerformanceMatrix(perf, solo, ref), float(doc.get("model_size", math.nan))


# -- landscape -----------------------------------------------------------------

def barycentric_grid(m: int, n: int) -> np.ndarray:
    """All ``(i, j, k) / n`` with ``i + j + k = n``: ``(n+1)(n+2)/2`` points."""
    if m != 3:
        raise InputError("the barycentric grid is only supported for 3 anchors")
    if n < 1:
        raise InputError("grid resolution must be >= 1")
    pts = [(i, j, n - i - j) for i in range(n, -1, -1) for j in range(n - i, -1, -1)]
    return np.array(pts, dtype=np.float64) / n


def random_pairs_buffer(env_params: envs.EnvParams, rng: np.random.Generator,
                        n_steps: int = RANDOM_STEPS, n_envs: int = RANDOM_ENVS) -> sac.ReplayBuffer:
    """A buffer of uniform-random-action transitions, used when no training buffer is at hand."""
    buf = sac.ReplayBuffer(n_steps)
    venv = envs.PointMassVec(env_params, n_envs)
    obs = venv.reset(rng)
    per = -(-n_steps // n_envs)
    for _ in range(per):
        if buf.size >= n_steps:
            break
        act = rng.uniform(-1.0, 1.0, size=(n_envs, envs.ACT_DIM))
        nxt, rew, done = venv.step(act)
        k = min(n_envs, n_steps - buf.size)
        buf.add_batch(obs[:k], act[:k], rew[:k], nxt[:k], np.full(k, float(done)), np.ones((k, 1)))
        obs = venv.reset(rng) if done else nxt
    venv.close()
    return buf


@dataclass
class LandscapePoint:
    alpha: np.ndarray
    mc_return: float
    critic: float


def landscape(ckpt: Checkpoint, env_params: envs.EnvParams, grid: np.ndarray,
              critics: Optional[list] = None, buffer: Optional[sac.ReplayBuffer] = None,
              mode: str = "both", seed=0, n_rollouts: int = MC_ROLLOUTS,
              n_pairs: int = CRITIC_PAIRS) -> list:
    """Monte-Carlo return and critic ``W`` at every grid point.

    Every point is rolled out from the same start states and scored on the same
    ``(s, a)`` pairs, so differences between points are not sampling noise.
    """
    if mode not in ("both", "mc", "critic"):
        raise InputError(f"unknown landscape mode {mode!r}")
    sub = ckpt.subspace
    if sub.n_anchors != 3:
        raise InputError(f"landscape needs exactly 3 anchors, checkpoint has {sub.n_anchors}")
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    rng = np.random.default_rng(seed)
    mc = np.full(grid.shape[0], math.nan)
    w = np.full(grid.shape[0], math.nan)
    if mode in ("both", "mc"):
        for p, a in enumerate(grid):
            mc[p] = sac.evaluate(sp.combine(sub, a), env_params, n_rollouts, seed)
    if mode in ("both", "critic"):
        if not critics:
            raise InputError("critic landscape needs the critic sidecar")
        if buffer is None:
            buffer = random_pairs_buffer(env_params, rng)
        pairs = sp.sample_pairs(buffer, n_pairs, rng)
        w = sp.w_values(critics, pairs, grid)
    return [LandscapePoint(grid[p].copy(), float(mc[p]), float(w[p])) for p in range(grid.shape[0])]


def write_landscape(path, points: list) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        m = len(points[0].alpha) if points else 3
        wr.writerow([f"alpha{i}" for i in range(m)] + ["mc_return", "critic"])
        for pt in points:
            wr.writerow([repr(float(x)) for x in pt.alpha] + [repr(pt.mc_return), repr(pt.critic)])


def read_landscape(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    m = sum(1 for h in header if h.startswith("alpha"))
    return [LandscapePoint(np.array([float(x) for x in r[:m]]), float(r[m]), float(r[m + 1])) for r in body]


def export_landscape(ckpt_path, task: int, grid_n: int, out_path, critic_path=None,
                     env_params: Optional[envs.EnvParams] = None, mode: str = "both", seed=0) -> list:
    """Load a checkpoint (and its critic sidecar) and write the landscape CSV for task ``task``."""
    ckpt = load_checkpoint(ckpt_path)
    if not 0 <= task < len(ckpt.registry):
        raise InputError(f"task {task} not in checkpoint ({len(ckpt.registry)} tasks)")
    if env_params is None:
        env_params = envs.make_task(ckpt.names[task]).env_params
    critics = None
    if mode != "mc":
        critic_path = critic_path or sidecar_path(ckpt_path)
        critics = critics_from(load_checkpoint(critic_path))
    pts = landscape(ckpt, env_params, barycentric_grid(3, grid_n), critics, mode=mode, seed=seed)
    write_landscape(out_path, pts)
    return pts


def sidecar_path(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.stem + ".critic" + p.suffix)
