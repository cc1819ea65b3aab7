"""Metrics (NLL, next-event RMSE, rule accuracy) and the numeric-feature ablation grid."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import EventSequence, RuleSet, canonicalize_rule
from .io import FORMAT_VERSION, corpus_fingerprint, stable_hash
from .mining import split_indices
from .simulation import ScenarioSpec, simulate_corpus
from .training import (EncodingConfig, FitConfig, FitError, FittedModel, corpus_design, fit,
                       per_sequence_nll, predict_next_time)

RMSE_ANCHOR = "one-step-ahead from the previous target event; history up to and including the anchor"
DETAIL_COLUMNS = ("sequence", "num_events", "num_targets", "nll", "rmse_points", "sq_error_sum",
                  "rmse_skipped")


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    nll: float
    rmse: float | None
    rule_accuracy: float | None
    rule_recall: float | None
    num_sequences: int
    rmse_points: int
    rmse_skipped: int
    details: list[dict] = field(default_factory=list)
    fingerprint: dict = field(default_factory=dict)
    label: str = "HRTPP"

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "hrtpp-eval-report",
            "nll": self.nll,
            "rmse": self.rmse,
            "rule_accuracy": self.rule_accuracy,
            "rule_recall": self.rule_recall,
            "num_sequences": self.num_sequences,
            "rmse_points": self.rmse_points,
            "rmse_skipped": self.rmse_skipped,
            "rmse_anchor": RMSE_ANCHOR,
            "fingerprint": self.fingerprint,
            "details": self.details,
        }

    def table(self) -> str:
        def fmt(x):
            return "-" if x is None else f"{x:.4f}"
        acc = "-" if self.rule_accuracy is None else f"{100 * self.rule_accuracy:.1f}%"
        rows = [("Model", "NLL", "RMSE", "Acc"), (self.label, fmt(self.nll), fmt(self.rmse), acc)]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"

    def details_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=DETAIL_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.details:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def _check_compatible(model: FittedModel, corpus: Sequence[EventSequence]) -> None:
    if not corpus:
        raise EvaluationError("empty test corpus")
    for i, s in enumerate(corpus):
        if (s.num_types, s.target_type) != (model.num_types, model.target_type):
            raise EvaluationError(
                f"sequence {i} has num_types={s.num_types}, target_type={s.target_type}; "
                f"the model expects {model.num_types}, {model.target_type}")


def next_event_errors(model: FittedModel, sequence: EventSequence) -> np.ndarray:
    """Predicted minus actual time for every target event after the first."""
    targets = sequence.target_times()
    errs = []
    for prev, actual in zip(targets[:-1], targets[1:]):
        history = sequence.truncate(prev, inclusive=True)
        errs.append(predict_next_time(model, history, float(prev)) - float(actual))
    return np.asarray(errs, dtype=float)


def evaluate(model: FittedModel, test_corpus: Sequence[EventSequence], truth: RuleSet | None = None,
             rmse: bool = True) -> EvalReport:
    """Held-out NLL, one-step-ahead RMSE and (with ``truth``) rule accuracy."""
    _check_compatible(model, test_corpus)
    design = corpus_design(test_corpus, list(model.rules), model.params.delta, model.encoding)
    nlls = per_sequence_nll(design, model.params.to_vector(), model.params.mask)
    details, sq_total, points, skipped = [], 0.0, 0, 0
    for i, (s, v) in enumerate(zip(test_corpus, nlls)):
        n_targets = len(s.target_times())
        row = {"sequence": i, "num_events": len(s), "num_targets": n_targets, "nll": float(v),
               "rmse_points": 0, "sq_error_sum": 0.0, "rmse_skipped": n_targets < 2}
        if rmse and n_targets >= 2:
            e = next_event_errors(model, s)
            row["rmse_points"], row["sq_error_sum"] = len(e), float(np.sum(e * e))
            sq_total += row["sq_error_sum"]
            points += len(e)
        elif n_targets < 2:
            skipped += 1
        details.append(row)
    nll_mean = float(np.mean(nlls))
    if not math.isfinite(nll_mean):
        raise EvaluationError("non-finite NLL on the test corpus")
    acc = rec = None
    if truth is not None:
        acc, rec = rule_accuracy(model.rules, truth), rule_recall(model.rules, truth)
    fingerprint = {"model": stable_hash(model.to_dict()), "corpus": corpus_fingerprint(test_corpus)}
    return EvalReport(nll_mean, math.sqrt(sq_total / points) if rmse and points else None, acc, rec,
                      len(test_corpus), points, skipped, details, fingerprint)


def _keys(rules) -> set[tuple]:
    return {canonicalize_rule(r).key() for r in rules}


def rule_accuracy(mined, truth) -> float:
    """Fraction of mined rules present in ``truth`` (precision under canonical equality)."""
    m = _keys(mined)
    if not m:
        warnings.warn("empty mined rule set; accuracy is defined as 0", RuntimeWarning)
        return 0.0
    return len(m & _keys(truth)) / len(m)


def rule_recall(mined, truth) -> float:
    t = _keys(truth)
    return len(_keys(mined) & t) / len(t) if t else 0.0


# -- ablation ------------------------------------------------------------------------

CATEGORIES = ("Category I", "Category II")
NFA_COLUMNS = ("with NFA", "without NFA")


@dataclass
class AblationGrid:
    cells: dict[tuple[str, str], float]
    train_nll: dict[tuple[str, str], float]
    scenario_hash: str
    num_train: int
    num_test: int

    def gap(self, category: str) -> float:
        """Without-NFA minus with-NFA held-out NLL; positive means the numeric term helps."""
        return self.cells[(category, "without NFA")] - self.cells[(category, "with NFA")]

    def nfa_helps(self) -> dict[str, bool]:
        return {c: self.gap(c) > 0 for c in CATEGORIES}

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "hrtpp-ablation",
            "scenario_hash": self.scenario_hash,
            "num_train": self.num_train,
            "num_test": self.num_test,
            "cells": {f"{c} / {n}": self.cells[(c, n)] for c in CATEGORIES for n in NFA_COLUMNS},
            "train_nll": {f"{c} / {n}": self.train_nll[(c, n)] for c in CATEGORIES for n in NFA_COLUMNS},
            "nfa_helps": self.nfa_helps(),
        }

    def table(self) -> str:
        rows = [("", *NFA_COLUMNS)] + [(c, *(f"{self.cells[(c, n)]:.4f}" for n in NFA_COLUMNS))
                                       for c in CATEGORIES]
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def run_ablation(scenario: ScenarioSpec, config: FitConfig = FitConfig(),
                 encoding: EncodingConfig | None = None, rules: RuleSet | None = None,
                 holdout_fraction: float = 0.2, corpus: Sequence[EventSequence] | None = None) -> AblationGrid:
    """Fit the four {Category I, II} x {with, without NFA} cells on one shared split.

    Category II uses ``rules`` (the planted rules by default). With NFA, the
    numeric term covers every non-target type in both categories, so Category
    II with an empty rule set reproduces Category I exactly.
    """
    if corpus is None:
        corpus, _ = simulate_corpus(scenario)
    if len(corpus) < 2:
        raise EvaluationError("ablation needs at least two sequences")
    rules = scenario.rules if rules is None else rules
    base = encoding or EncodingConfig(delta=scenario.delta, rule_decay_rate=scenario.rule_decay_rate,
                                      num_decay_rate=scenario.num_decay_rate)
    delta = base.resolve_delta(corpus)
    train_idx, test_idx = split_indices(len(corpus), config.seed, holdout_fraction)
    train = [corpus[i] for i in train_idx]
    encodings = {"with NFA": replace(base, numeric=True, numeric_mask="all"),
                 "without NFA": replace(base, numeric=False)}
    cells, train_nll = {}, {}
    for cat in CATEGORIES:
        cell_rules = list(rules) if cat == "Category II" else []
        full = corpus_design(corpus, cell_rules, delta, base)
        d_train, d_test = full.select_sequences(train_idx), full.select_sequences(test_idx)
        for col in NFA_COLUMNS:
            try:
                m = fit(train, cell_rules, config, encodings[col], design=d_train, delta=delta,
                        names=scenario.names)
            except FitError as exc:
                raise FitError(f"ablation cell {cat} / {col} failed: {exc}") from exc
            held = per_sequence_nll(d_test, m.params.to_vector(), m.params.mask)
            cells[(cat, col)] = float(np.mean(held))
            train_nll[(cat, col)] = m.train_nll
    return AblationGrid(cells, train_nll, scenario.spec_hash(), len(train_idx), len(test_idx))
