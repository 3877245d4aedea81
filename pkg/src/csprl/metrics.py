"""Continual-RL metrics over a per-task performance matrix.

``perf[i, j]`` is the mean return on task ``i`` of the policy the learner
uses for task ``i`` after finishing task ``j`` (undefined, NaN, for ``j < i``).
``solo[i]`` is the return of a single-task run on task ``i`` and
``reference[i]`` the normaliser (the SAC-N return). All summary metrics
work on returns divided by the reference.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

from .errors import InputError

SOLO = "solo"


@dataclass(frozen=True)
class EvalRecord:
    task: int
    stage: Union[int, str]
    mean_return: float
    n_eval: int
    seed: int

    def __post_init__(self):
        if self.n_eval < 1:
            raise InputError("n_eval must be >= 1")
        if not (self.stage == SOLO or (isinstance(self.stage, int) and self.stage >= 0)):
            raise InputError(f"bad stage {self.stage!r}")


@dataclass
class PerformanceMatrix:
    perf: np.ndarray
    solo: Optional[np.ndarray] = None
    reference: Optional[np.ndarray] = None

    def __post_init__(self):
        self.perf = np.asarray(self.perf, dtype=np.float64)
        n = self.perf.shape[0]
        if self.perf.shape != (n, n) or n < 1:
            raise InputError(f"performance matrix must be square, got {self.perf.shape}")
        for name in ("solo", "reference"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if v.shape != (n,):
                    raise InputError(f"{name} must have length {n}")
                setattr(self, name, v)

    @property
    def n_tasks(self) -> int:
        return self.perf.shape[0]

    @classmethod
    def from_records(cls, records: Iterable[EvalRecord], n_tasks: int,
                     reference: Optional[np.ndarray] = None) -> "PerformanceMatrix":
        perf = np.full((n_tasks, n_tasks), np.nan)
        solo = np.full(n_tasks, np.nan)
        for r in records:
            if r.stage == SOLO:
                solo[r.task] = r.mean_return
            else:
                perf[r.task, r.stage] = r.mean_return
        has_solo = not np.all(np.isnan(solo))
        return cls(perf, solo if has_solo else None, reference)

    def _scale(self) -> np.ndarray:
        if self.reference is None:
            return np.ones(self.n_tasks)
        if np.any(self.reference == 0) or not np.all(np.isfinite(self.reference)):
            raise InputError("reference returns must be finite and nonzero")
        return self.reference

    def normalized(self) -> np.ndarray:
        return self.perf / self._scale()[:, None]


def _need(values: np.ndarray, what: str) -> np.ndarray:
    if np.any(np.isnan(values)):
        raise InputError(f"missing entries in {what}")
    return values


def average_performance(m: PerformanceMatrix) -> float:
    """Mean normalised return of every task's policy after the last task."""
    final = _need(m.perf[:, -1], "final column") / m._scale()
    return float(np.mean(final))


def forgetting(m: PerformanceMatrix) -> float:
    """Mean drop between a task's end-of-training return and its final return."""
    scale = m._scale()
    diag = _need(np.diag(m.perf).copy(), "diagonal") / scale
    final = _need(m.perf[:, -1], "final column") / scale
    return float(np.mean(diag - final))


def forward_transfer(m: PerformanceMatrix) -> float:
    """Mean gain of the sequential end-of-task return over a solo run on that task."""
    if m.solo is None:
        raise InputError("forward transfer needs the solo column")
    scale = m._scale()
    diag = _need(np.diag(m.perf).copy(), "diagonal") / scale
    solo = _need(m.solo, "solo column") / scale
    return float(np.mean(diag - solo))


def model_size(n_params_total: float, n_params_actor: int) -> float:
    """Stored parameters in units of one actor network."""
    return float(n_params_total) / float(n_params_actor)


def replay_decisions(log: Iterable, epsilon: float) -> list:
    """Re-apply the extend rule to recorded ``(w_new, w_old)`` pairs at threshold ``epsilon``."""
    out = []
    for entry in log:
        w_new, w_old = (entry.w_new, entry.w_old) if hasattr(entry, "w_new") else entry
        out.append(bool(w_new > (1.0 + epsilon) * w_old))
    return out


def growing_factor(log: list, thresholds: Iterable[float]) -> list:
    """``(epsilon, anchors / tasks)`` for each threshold, replaying a fixed decision log.

    The log holds one entry per task after the first, so a run over ``N`` tasks
    has ``N - 1`` entries and the anchor count is one plus the extensions.
    """
    n_tasks = len(log) + 1
    rows = []
    for eps in thresholds:
        anchors = 1 + sum(replay_decisions(log, eps))
        rows.append((float(eps), anchors / n_tasks))
    return rows
