"""Intensity traces over one sequence, for plotting the fitted intensity with its markers."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import EventSequence
from .encoders import decayed_sums
from .likelihood import softplus, trigger_sets
from .training import FittedModel


@dataclass
class Trace:
    times: np.ndarray
    intensity: np.ndarray
    preactivation: np.ndarray
    contributions: np.ndarray   # (len(times), num_rules): alpha_j e_j(t)
    rule_texts: list[str]
    triggers: list[np.ndarray]
    sequence: EventSequence
    names: tuple[str, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "intensity", "preactivation"] + [f"rule {j}: {t}" for j, t in enumerate(self.rule_texts)])
        for i in range(len(self.times)):
            w.writerow([repr(float(self.times[i])), repr(float(self.intensity[i])),
                        repr(float(self.preactivation[i]))] + [repr(float(c)) for c in self.contributions[i]])
        return buf.getvalue()

    def annotations_csv(self) -> str:
        rows = []
        for j, tr in enumerate(self.triggers):
            rows += [(float(t), "trigger", self.rule_texts[j], "") for t in tr]
        s = self.sequence
        rows += [(float(t), "event", self.names[int(k) - 1], repr(float(v)))
                 for t, k, v in zip(s.times, s.types, s.values)]
        rows.sort(key=lambda r: (r[0], r[1] != "event", r[2]))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "kind", "label", "value"])
        for t, kind, label, value in rows:
            w.writerow([repr(t), kind, label, value])
        return buf.getvalue()


def _evaluate(model: FittedModel, seq: EventSequence, triggers, q: np.ndarray, inclusive: bool):
    p = model.params
    contrib = np.column_stack([a * decayed_sums(tr, None, p.rule_decay_rate, q, inclusive)
                               for a, tr in zip(p.alpha, triggers)]) if triggers else np.zeros((len(q), 0))
    x = p.lambda0 + contrib.sum(axis=1)
    for k in range(1, seq.num_types + 1):
        if p.mask[k - 1] and p.beta[k - 1]:
            sel = seq.types == k
            x = x + p.beta[k - 1] * decayed_sums(seq.times[sel], seq.values[sel], p.num_decay_rate, q, inclusive)
    return x, contrib


def intensity_trace(model: FittedModel, seq: EventSequence, dt: float | None = None) -> Trace:
    """Right-continuous intensity on a regular grid of step ``dt`` (default horizon/2000).

    Every event and trigger time also gets a pair of rows, the left limit
    followed by the value at that time, so jumps render as vertical steps.
    """
    if (seq.num_types, seq.target_type) != (model.num_types, model.target_type):
        raise ValueError("sequence schema does not match the model")
    T = seq.horizon
    if dt is None:
        dt = T / 2000 if T > 0 else 1.0
    if not dt > 0:
        raise ValueError("dt must be positive")
    triggers = trigger_sets(seq, list(model.rules), model.params.delta)
    grid = np.arange(0.0, T + 0.5 * dt, dt) if T > 0 else np.zeros(1)
    grid = grid[grid <= T]
    marks = np.unique(np.concatenate([seq.times] + [t for t in triggers]))
    marks = marks[(marks >= 0) & (marks <= T)]
    times = np.concatenate([grid, marks, marks])
    inclusive = np.concatenate([np.ones(len(grid), bool), np.zeros(len(marks), bool), np.ones(len(marks), bool)])
    order = np.lexsort((inclusive, times))
    times, inclusive = times[order], inclusive[order]
    x = np.empty(len(times))
    contrib = np.empty((len(times), len(model.rules)))
    for flag in (False, True):
        sel = inclusive == flag
        x[sel], contrib[sel] = _evaluate(model, seq, triggers, times[sel], flag)
    # a grid point landing on a mark duplicates the mark's right value
    keep = np.ones(len(times), bool)
    keep[1:] = ~((times[1:] == times[:-1]) & inclusive[1:] & inclusive[:-1])
    times, x, contrib = times[keep], x[keep], contrib[keep]
    return Trace(times, softplus(x, model.params.gamma), x, contrib, model.rule_texts(), triggers, seq, model.names)
