"""Rule-trigger times and the decayed rule / numeric signals built on them.

Trigger semantics. A leaf ``X_k`` is satisfied at every type-k event. A
relation node merges the satisfaction streams of its two operands in time
order and matches points one-to-one, online:

* ``before(A, B)``: a B point at ``t_b`` fires if an unconsumed A point has
  ``t_a < t_b - delta``; it consumes the oldest such A point.
* ``equal(A, B)``: a point at ``t`` fires if an unconsumed point of the other
  operand lies in ``[t - delta, t]``; it consumes the oldest one. Emitted time
  is ``t``, i.e. the later of the pair.
* ``and(A, B)``: a point fires if any unconsumed point of the other operand
  exists; it consumes the oldest one.

Unmatched points stay pending (``before`` keeps only its A side pending).
Because decisions at time ``t`` only look at points up to ``t``, the number of
triggers up to ``t`` equals the maximum matching among points up to ``t``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import Body, EventSequence, Pred, Relation, RelationKind, canonicalize_body


@dataclass(frozen=True)
class DecayKernel:
    rate: float
    kind: str = "exponential"

    def __post_init__(self):
        if self.kind != "exponential":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")
        if not self.rate > 0:
            raise ValueError("decay rate must be positive")

    def __call__(self, dt):
        dt = np.asarray(dt, dtype=float)
        out = np.where(dt >= 0, np.exp(-self.rate * np.maximum(dt, 0.0)), 0.0)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class TriggerSet:
    rule_index: int
    times: np.ndarray


def _match(kind: RelationKind, left: np.ndarray, right: np.ndarray, delta: float) -> list[float]:
    # Merge both streams; ties keep the left operand first.
    stream = sorted([(t, 0) for t in left] + [(t, 1) for t in right], key=lambda p: (p[0], p[1]))
    pending = (deque(), deque())
    out = []
    for t, side in stream:
        other = pending[1 - side]
        if kind is RelationKind.BEFORE:
            if side == 0:
                pending[0].append(t)
            elif other and other[0] < t - delta:
                other.popleft()
                out.append(t)
        elif kind is RelationKind.EQUAL:
            while other and t - other[0] > delta:
                other.popleft()
            if other:
                other.popleft()
                out.append(t)
            else:
                pending[side].append(t)
        else:
            if other:
                other.popleft()
                out.append(t)
            else:
                pending[side].append(t)
    return out


def _satisfaction(body: Body, seq: EventSequence, delta: float) -> np.ndarray:
    if isinstance(body, Pred):
        return seq.times_of(body.event_type)
    left = _satisfaction(body.left, seq, delta)
    right = _satisfaction(body.right, seq, delta)
    return np.asarray(_match(body.kind, left, right, delta), dtype=float)


def satisfaction_time(body: Body, sequence: EventSequence, delta: float) -> np.ndarray:
    """Sorted times at which ``body`` becomes satisfied (with multiplicity)."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    if isinstance(body, Relation):
        body = canonicalize_body(body)
    return np.sort(np.asarray(_satisfaction(body, sequence, delta), dtype=float))


def rule_signal(triggers: TriggerSet | np.ndarray, kernel: DecayKernel, t: float) -> float:
    times = triggers.times if isinstance(triggers, TriggerSet) else np.asarray(triggers, dtype=float)
    past = times[times <= t]
    return float(np.sum(np.exp(-kernel.rate * (t - past))))


def numeric_signal(sequence: EventSequence, type_k: int, mask_k: bool, kernel: DecayKernel, t: float) -> float:
    if not 1 <= type_k <= sequence.num_types:
        raise ValueError(f"type {type_k} outside [1, {sequence.num_types}]")
    if not mask_k:
        return 0.0
    sel = (sequence.types == type_k) & (sequence.times <= t)
    return float(np.sum(sequence.values[sel] * np.exp(-kernel.rate * (t - sequence.times[sel]))))


def decayed_sums(times: np.ndarray, weights: np.ndarray | None, rate: float,
                 queries: np.ndarray, inclusive: bool = True) -> np.ndarray:
    """``sum_i w_i exp(-rate (q - t_i))`` over ``t_i <= q`` (``< q`` if not inclusive).

    Uses the running-sum recursion of the exponential kernel, so the cost is
    O(len(times) + len(queries)). ``times`` must be sorted.
    """
    queries = np.asarray(queries, dtype=float)
    n = len(times)
    if n == 0:
        return np.zeros(queries.shape)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    run = np.empty(n)
    acc, prev = 0.0, float(times[0])
    for i in range(n):
        ti = float(times[i])
        acc = acc * math.exp(-rate * (ti - prev)) + w[i]
        run[i] = acc
        prev = ti
    idx = np.searchsorted(times, queries, side="right" if inclusive else "left") - 1
    out = np.zeros(queries.shape)
    has = idx >= 0
    j = idx[has]
    out[has] = run[j] * np.exp(-rate * (queries[has] - np.asarray(times)[j]))
    return out


def default_delta(corpus) -> float:
    """0.05 x the mean gap between consecutive events across a corpus."""
    gaps = [np.diff(s.times) for s in corpus if len(s) > 1]
    gaps = np.concatenate(gaps) if gaps else np.array([])
    gaps = gaps[gaps > 0]
    if gaps.size == 0:
        return 0.05
    return 0.05 * float(gaps.mean())
