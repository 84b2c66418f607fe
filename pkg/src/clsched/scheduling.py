"""Budgeted selection of which landmark agents' measurements to process.

All greedy schedulers pick one landmark per round, apply its DMV update, and
repeat until the budget ``q`` is spent. They differ in how a candidate is
scored and in what has to be communicated to score it:

* ``schedule_dnn`` scores with the surrogate from local data plus one scalar
  (the landmark's covariance trace) per candidate; full beliefs are fetched
  only for the selected agents.
* ``schedule_greedy_exact`` scores with the exact updated-covariance trace and
  therefore needs every candidate's full belief up front.

Ties go to the lowest agent id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from clsched.fusion import RelativeMeasurement, dmv_update
from clsched.motion import Belief

BELIEF_SCALARS = 3 + 9


@dataclass
class CommsLedger:
    """Scalars and full beliefs received by the scheduling agent in one step."""

    scalars_sent: int = 0
    beliefs_sent: int = 0

    def add_scalars(self, n: int) -> None:
        self.scalars_sent += int(n)

    def add_belief(self) -> None:
        self.beliefs_sent += 1

    @property
    def bytes_equivalent(self) -> int:
        return self.scalars_sent + self.beliefs_sent * BELIEF_SCALARS

    def __iadd__(self, other: CommsLedger) -> CommsLedger:
        self.scalars_sent += other.scalars_sent
        self.beliefs_sent += other.beliefs_sent
        return self


@dataclass(frozen=True)
class CandidateSet:
    """Landmark agents in range, each advertising ``trace(P_j)``, plus the budget."""

    metadata: tuple[tuple[int, float], ...]
    budget: int

    def __init__(self, metadata: Mapping[int, float] | Iterable[tuple[int, float]], budget: int):
        items = tuple(sorted((int(k), float(v)) for k, v in
                             (metadata.items() if isinstance(metadata, Mapping) else metadata)))
        ids = [k for k, _ in items]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate agent ids in candidate set: {ids}")
        if any(not v > 0 for _, v in items):
            raise ValueError("candidate metadata (covariance trace) must be positive")
        if budget < 1:
            raise ValueError(f"budget must be >= 1, got {budget}")
        object.__setattr__(self, "metadata", items)
        object.__setattr__(self, "budget", int(budget))

    @property
    def ids(self) -> list[int]:
        return [k for k, _ in self.metadata]

    def __len__(self) -> int:
        return len(self.metadata)


@dataclass
class ScheduleResult:
    selected: list[int]
    belief: Belief
    predictions: list[float] = field(default_factory=list)  # score of each pick when chosen
    ledger: CommsLedger = field(default_factory=CommsLedger)
    post_traces: list[float] = field(default_factory=list)  # trace(P) after each applied update


class SchedulingError(RuntimeError):
    """A provider failed mid-schedule; ``ledger`` holds what was exchanged so far."""

    def __init__(self, message: str, ledger: CommsLedger, selected: list[int]):
        super().__init__(message)
        self.ledger = ledger
        self.selected = selected


# (bel_i, R, agent_id, trace_pj) -> predicted trace of the updated covariance
Surrogate = Callable[[Belief, np.ndarray, int, float], float]


def _pick(scores: Sequence[tuple[int, float]], select: str) -> tuple[int, float]:
    best_id, best = None, None
    for agent_id, s in scores:  # ascending ids; strict comparison keeps the lowest id on ties
        if best is None or (s < best if select == "argmin" else s > best):
            best_id, best = agent_id, s
    return best_id, best


def schedule_dnn(bel_i: Belief, R, candidates: CandidateSet, model: Surrogate,
                 belief_provider: Callable[[int], Belief],
                 measurement_provider: Callable[[int], RelativeMeasurement],
                 select: str = "argmin") -> ScheduleResult:
    """Surrogate-driven sequential greedy selection and update.

    Each round scores every remaining candidate with ``model`` using the
    current (already partially updated) local belief, takes the best one,
    requests its belief and measurement, and applies the DMV update.
    ``select="argmax"`` reproduces the literal max-prediction rule for
    comparison; the default picks the smallest predicted trace.
    """
    if select not in ("argmin", "argmax"):
        raise ValueError(f"select must be 'argmin' or 'argmax', got {select!r}")
    R = np.asarray(R, dtype=float)
    ledger = CommsLedger()
    ledger.add_scalars(len(candidates))
    remaining = dict(candidates.metadata)
    selected: list[int] = []
    preds: list[float] = []
    traces: list[float] = []
    bel = bel_i
    for _ in range(min(candidates.budget, len(remaining))):
        scores = [(j, float(model(bel, R, j, remaining[j]))) for j in sorted(remaining)]
        j_star, y_hat = _pick(scores, select)
        try:
            bel_j = belief_provider(j_star)
            ledger.add_belief()
            z = measurement_provider(j_star)
        except Exception as exc:
            raise SchedulingError(f"provider failed for agent {j_star}: {exc}", ledger, selected) from exc
        bel = dmv_update(bel, bel_j, z)
        selected.append(j_star)
        preds.append(y_hat)
        traces.append(bel.trace)
        del remaining[j_star]
    return ScheduleResult(selected, bel, preds, ledger, traces)


def schedule_greedy_exact(bel_i: Belief,
                          candidates: Mapping[int, tuple[Belief, RelativeMeasurement]],
                          q: int) -> ScheduleResult:
    """Sequential greedy with exact scores: each round runs the full DMV update
    for every remaining candidate and keeps the one with the smallest trace."""
    if q < 1:
        raise ValueError(f"budget must be >= 1, got {q}")
    ledger = CommsLedger()
    for _ in candidates:
        ledger.add_belief()
    remaining = dict(candidates)
    selected: list[int] = []
    scores_taken: list[float] = []
    bel = bel_i
    for _ in range(min(q, len(remaining))):
        trials = {j: dmv_update(bel, *remaining[j]) for j in sorted(remaining)}
        j_star, tr = _pick([(j, trials[j].trace) for j in sorted(trials)], "argmin")
        bel = trials[j_star]
        selected.append(j_star)
        scores_taken.append(tr)
        del remaining[j_star]
    return ScheduleResult(selected, bel, scores_taken, ledger, list(scores_taken))


def schedule_random(candidates: Sequence[int], q: int, seed=None) -> list[int]:
    """Uniform sample of ``min(q, len(candidates))`` ids without replacement.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if q < 1:
        raise ValueError(f"budget must be >= 1, got {q}")
    ids = sorted(candidates)
    if q >= len(ids):
        return ids
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [ids[int(k)] for k in rng.choice(len(ids), size=q, replace=False)]


def schedule_full(bel_i: Belief, candidates: Mapping[int, tuple[Belief, RelativeMeasurement]]
                  ) -> ScheduleResult:
    """Process every candidate in ascending id order (no budget)."""
    ledger = CommsLedger()
    bel = bel_i
    traces = []
    for j in sorted(candidates):
        ledger.add_belief()
        bel = dmv_update(bel, *candidates[j])
        traces.append(bel.trace)
    return ScheduleResult(sorted(candidates), bel, [], ledger, traces)


def ledger_compare(ledger_dnn: CommsLedger, ledger_sga: CommsLedger, m: int, q: int) -> dict:
    """Check one step's ledgers against the expected message counts.

    Surrogate scheduling should receive ``m`` scalars and ``min(q, m)``
    beliefs; exact sequential greedy should receive ``m`` beliefs.
    """
    expected_beliefs = min(q, m)
    problems = []
    if ledger_dnn.scalars_sent != m:
        problems.append(f"dnn scalars {ledger_dnn.scalars_sent} != m={m}")
    if ledger_dnn.beliefs_sent != expected_beliefs:
        problems.append(f"dnn beliefs {ledger_dnn.beliefs_sent} != {expected_beliefs}")
    if ledger_sga.beliefs_sent != m:
        problems.append(f"sga beliefs {ledger_sga.beliefs_sent} != m={m}")
    sga_bytes = ledger_sga.bytes_equivalent
    return {
        "m": m,
        "q": q,
        "dnn_bytes": ledger_dnn.bytes_equivalent,
        "sga_bytes": sga_bytes,
        "ratio": ledger_dnn.bytes_equivalent / sga_bytes if sga_bytes else math.nan,
        "ok": not problems,
        "problems": problems,
    }
