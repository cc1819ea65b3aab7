"""Two-phase rule discovery: predicate filtering + candidate generation, then
a probabilistic search over fixed-size rule subsets scored by held-out likelihood.

The subset search keeps one inclusion probability per candidate. Each round
samples a batch of subsets from those probabilities (with epsilon-uniform
exploration), fits each one, and moves the probabilities toward the inclusion
frequencies among the best quarter of all subsets seen so far.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import EventSequence, Pred, Relation, RelationKind, Rule, RuleSet, body_key, canonicalize_rule
from .dsl import default_names, format_rules_text, id_table, print_rule
from .io import FORMAT_VERSION
from .likelihood import Design
from .training import (EncodingConfig, FitConfig, FitError, FittedModel, corpus_design, fit, mean_nll)

log = logging.getLogger(__name__)

NUM_RELATIONS = len(RelationKind)


class MiningError(RuntimeError):
    pass


class PoolTooLargeError(MiningError):
    pass


@dataclass(frozen=True)
class MiningConfig:
    subset_size: int = 10
    budget: int = 100
    batch_size: int = 5
    epsilon: float = 0.1
    elite_quantile: float = 0.25
    smoothing: float = 0.7
    p_min: float = 0.01
    p_max: float = 0.99
    pool_cap: int = 5000
    filter_tolerance: float = 1e-3
    all_predicate_leaves: bool = False
    holdout_fraction: float = 0.2
    record_wall_time: bool = False

    def __post_init__(self):
        if self.subset_size < 1 or self.budget < 1 or self.batch_size < 1:
            raise ValueError("subset_size, budget and batch_size must be >= 1")
        if not 0 <= self.epsilon <= 1 or not 0 < self.elite_quantile <= 1 or not 0 <= self.smoothing < 1:
            raise ValueError("epsilon, elite_quantile or smoothing out of range")
        if not 0 < self.p_min < self.p_max < 1:
            raise ValueError("need 0 < p_min < p_max < 1")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in (0, 1)")


def split_indices(n: int, seed: int, holdout_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/held-out split; both parts non-empty when ``n >= 2``."""
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5917])).permutation(n)
    n_test = int(round(n * holdout_fraction))
    n_test = min(max(n_test, 1), n - 1) if n >= 2 else 0
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# -- phase one: predicate filtering ---------------------------------------------

@dataclass(frozen=True)
class FilterResult:
    retained: tuple[int, ...]
    deltas: dict[int, float]
    baseline_nll: float


def filter_predicates(corpus: Sequence[EventSequence], config: FitConfig = FitConfig(),
                      encoding: EncodingConfig = EncodingConfig(), tolerance: float = 1e-3,
                      holdout_fraction: float = 0.2) -> FilterResult:
    """Keep predicates whose single-predicate rule lowers held-out NLL by more than ``tolerance``.

    The baseline and every single-rule model carry the numeric term for all
    non-target types, so a delta measures what the rule adds beyond it.
    """
    if not corpus:
        raise MiningError("empty corpus")
    K, target = corpus[0].num_types, corpus[0].target_type
    enc = replace(encoding, numeric_mask="all")
    delta = enc.resolve_delta(corpus)
    present = sorted({int(k) for s in corpus for k in s.types} - {target})
    singles = [Rule(Pred(k), target) for k in present]
    if not singles:
        return FilterResult((), {}, float("nan"))
    train_idx, test_idx = split_indices(len(corpus), config.seed, holdout_fraction)
    train = [corpus[i] for i in train_idx]
    full = corpus_design(corpus, singles, delta, enc)
    d_train, d_test = full.select_sequences(train_idx), full.select_sequences(test_idx)

    base = fit(train, [], config, enc, design=d_train.select_rules([]), delta=delta)
    base_nll = mean_nll(d_test.select_rules([]), base.params.to_vector(), base.params.mask)
    deltas = {}
    for j, rule in enumerate(singles):
        m = fit(train, [rule], config, enc, design=d_train.select_rules([j]), delta=delta)
        deltas[rule.predicates[0]] = base_nll - mean_nll(d_test.select_rules([j]), m.params.to_vector(),
                                                         m.params.mask)
    retained = tuple(k for k in present if deltas[k] > tolerance)
    return FilterResult(retained, deltas, base_nll)


# -- candidate generation ---------------------------------------------------------

@dataclass(frozen=True)
class CandidatePool:
    candidates: tuple[Rule, ...]
    filtered_predicates: frozenset[int]
    raw_space: dict[int, int]
    target: int

    def __len__(self) -> int:
        return len(self.candidates)

    def rules(self, indices: Sequence[int] = None) -> RuleSet:
        idx = range(len(self.candidates)) if indices is None else indices
        return RuleSet((self.candidates[i] for i in idx), target=self.target)


def raw_space_size(num_predicates: int, m: int, num_relations: int = NUM_RELATIONS) -> int:
    """Unconstrained rule count with ``m`` predicates: K^m C^(m-1)."""
    return num_predicates ** m * num_relations ** (m - 1)


def _bodies(leafset: Sequence[int], m: int):
    if m == 1:
        for k in leafset:
            yield Pred(k)
        return
    for split in range(1, m):
        for left in _bodies(leafset, split):
            for right in _bodies(leafset, m - split):
                for kind in RelationKind:
                    yield Relation(kind, left, right)


def generate_candidates(filtered: Sequence[int], num_types: int, max_predicates: int, target: int,
                        all_predicate_leaves: bool = False, cap: int = 5000) -> CandidatePool:
    """All canonical rules of 1..max_predicates leaves with at least one filtered leaf."""
    filtered = frozenset(int(k) for k in filtered)
    raw = {m: raw_space_size(num_types, m) for m in range(1, max_predicates + 1)}
    if not filtered:
        warnings.warn("no predicates passed filtering; the candidate pool is empty", RuntimeWarning)
        return CandidatePool((), filtered, raw, target)
    if target in filtered or any(not 1 <= k <= num_types for k in filtered):
        raise ValueError("filtered predicates must be non-target types in [1, num_types]")
    leafset = sorted(k for k in range(1, num_types + 1) if k != target) if all_predicate_leaves \
        else sorted(filtered)
    seen = {}
    for m in range(1, max_predicates + 1):
        for body in _bodies(leafset, m):
            rule = canonicalize_rule(Rule(body, target))
            if filtered.isdisjoint(rule.predicates):
                continue
            key = rule.key()
            if key not in seen:
                seen[key] = rule
                if len(seen) > cap:
                    raise PoolTooLargeError(
                        f"candidate pool exceeds {cap} rules; tighten predicate filtering or lower max_predicates")
    ordered = sorted(seen.values(), key=lambda r: (len(r), body_key(r.body)))
    log.info("candidate pool: %d rules (raw space %s)", len(ordered), raw)
    return CandidatePool(tuple(ordered), filtered, raw, target)


# -- phase two: subset search -----------------------------------------------------

@dataclass
class Evaluation:
    subset: tuple[int, ...]
    score: float           # held-out mean log-likelihood per sequence
    train_nll: float
    heldout_nll: float
    epochs: int
    alpha: tuple[float, ...]
    iteration: int
    wall_time: float | None = None
    error: str | None = None


@dataclass
class MiningState:
    inclusion_probs: np.ndarray
    evaluated: dict[tuple[int, ...], float] = field(default_factory=dict)
    best_subset: tuple[int, ...] | None = None
    best_score: float = -math.inf
    iteration: int = 0
    seed: int = 0

    def record(self, subset: tuple[int, ...], score: float) -> None:
        self.evaluated[subset] = score
        if score > self.best_score or (score == self.best_score and subset < self.best_subset):
            self.best_subset, self.best_score = subset, score


@dataclass
class MiningReport:
    pool: CandidatePool
    names: tuple[str, ...]
    evaluations: list[Evaluation]
    prob_history: list[list[float]]
    best_subset: tuple[int, ...]
    best_score: float
    best_model: FittedModel
    config: MiningConfig
    sampled: int
    cache_hits: int
    filter_result: FilterResult | None = None

    @property
    def best_rules(self) -> RuleSet:
        return self.best_model.rules

    def rules_text(self) -> str:
        return format_rules_text(self.best_model.rules, id_table(list(self.names)),
                                 self.best_model.params.alpha)

    def to_dict(self) -> dict:
        ids = id_table(list(self.names))
        evals = []
        for e in self.evaluations:
            row = {"subset": list(e.subset), "score": e.score, "train_nll": e.train_nll,
                   "heldout_nll": e.heldout_nll, "epochs": e.epochs, "alpha": list(e.alpha),
                   "iteration": e.iteration}
            if e.wall_time is not None:
                row["wall_time"] = e.wall_time
            if e.error is not None:
                row["error"] = e.error
            evals.append(row)
        out = {
            "format_version": FORMAT_VERSION,
            "kind": "hrtpp-mining-report",
            "names": list(self.names),
            "pool": [print_rule(r, ids) for r in self.pool.candidates],
            "filtered_predicates": sorted(self.pool.filtered_predicates),
            "raw_space": {str(m): n for m, n in self.pool.raw_space.items()},
            "evaluations": evals,
            "probability_trajectory": self.prob_history,
            "best_subset": list(self.best_subset),
            "best_score": self.best_score,
            "best_rules": self.rules_text().splitlines(),
            "best_model": self.best_model.to_dict(),
            "config": asdict(self.config),
            "stats": {"evaluations": len(self.evaluations), "sampled": self.sampled,
                      "cache_hits": self.cache_hits,
                      "cache_hit_rate": self.cache_hits / self.sampled if self.sampled else 0.0},
        }
        if self.filter_result is not None:
            out["filter"] = {"retained": list(self.filter_result.retained),
                             "deltas": {str(k): v for k, v in sorted(self.filter_result.deltas.items())},
                             "baseline_nll": self.filter_result.baseline_nll}
        return out


class EliteSurrogate:
    """Independent inclusion probabilities refined toward the elite subsets.

    Any object with ``probs``, ``draw(rng)`` and ``update(evaluated)`` can take
    its place in :func:`optimize_ruleset`.
    """

    def __init__(self, n: int, subset_size: int, cfg: MiningConfig):
        self.n, self.k, self.cfg = n, subset_size, cfg
        self.probs = np.clip(np.full(n, subset_size / n), cfg.p_min, cfg.p_max)

    def draw(self, rng: np.random.Generator) -> tuple[int, ...]:
        if rng.random() < self.cfg.epsilon:
            idx = rng.choice(self.n, size=self.k, replace=False)
        else:
            idx = rng.choice(self.n, size=self.k, replace=False, p=self.probs / self.probs.sum())
        return tuple(sorted(int(i) for i in idx))

    def update(self, evaluated: dict[tuple[int, ...], float]) -> None:
        cfg = self.cfg
        ranked = sorted(evaluated.items(), key=lambda kv: (-kv[1], kv[0]))
        n_elite = max(1, int(math.ceil(cfg.elite_quantile * len(ranked))))
        freq = np.zeros(self.n)
        for subset, _ in ranked[:n_elite]:
            freq[list(subset)] += 1.0
        freq /= n_elite
        p = cfg.smoothing * self.probs + (1.0 - cfg.smoothing) * freq
        self.probs = np.clip(p, cfg.p_min, cfg.p_max)


def _first_unevaluated(n: int, k: int, evaluated, pending) -> tuple[int, ...] | None:
    for combo in itertools.combinations(range(n), k):
        if combo not in evaluated and combo not in pending:
            return combo
    return None


def optimize_ruleset(pool: CandidatePool, corpus: Sequence[EventSequence], subset_size: int, budget: int,
                     seed: int = 0, *, config: FitConfig = FitConfig(),
                     encoding: EncodingConfig = EncodingConfig(), mining: MiningConfig | None = None,
                     names: Sequence[str] | None = None, design: Design | None = None) -> MiningReport:
    """Search fixed-size subsets of ``pool`` for the best held-out log-likelihood."""
    n = len(pool)
    if not 1 <= subset_size <= n:
        raise ValueError(f"subset_size must be in [1, {n}]")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not corpus or len(corpus) < 2:
        raise MiningError("need at least two sequences for a held-out split")
    cfg = replace(mining or MiningConfig(), subset_size=subset_size, budget=budget)
    K = corpus[0].num_types
    names = tuple(names) if names is not None else tuple(default_names(K))
    delta = encoding.resolve_delta(corpus)
    rules = list(pool.candidates)
    if design is None:
        design = corpus_design(corpus, rules, delta, encoding)
    train_idx, test_idx = split_indices(len(corpus), seed, cfg.holdout_fraction)
    train = [corpus[i] for i in train_idx]
    d_train, d_test = design.select_sequences(train_idx), design.select_sequences(test_idx)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB0]))
    total = math.comb(n, subset_size)
    surrogate = EliteSurrogate(n, subset_size, cfg)
    state = MiningState(surrogate.probs, seed=seed)
    evaluations: list[Evaluation] = []
    models: dict[tuple[int, ...], FittedModel] = {}
    prob_history = [state.inclusion_probs.tolist()]
    sampled = cache_hits = 0

    while len(evaluations) < budget and len(state.evaluated) < total:
        state.iteration += 1
        batch: list[tuple[int, ...]] = []
        while len(batch) < cfg.batch_size and len(evaluations) + len(batch) < budget \
                and len(state.evaluated) + len(batch) < total:
            subset = None
            for _ in range(50):
                cand = surrogate.draw(rng)
                sampled += 1
                if cand in state.evaluated or cand in batch:
                    cache_hits += 1
                    continue
                subset = cand
                break
            if subset is None:
                subset = _first_unevaluated(n, subset_size, state.evaluated, set(batch))
                if subset is None:
                    break
            batch.append(subset)
        for subset in batch:
            t0 = time.perf_counter()
            cols = list(subset)
            try:
                m = fit(train, pool.rules(cols), config, encoding, names=names,
                        design=d_train.select_rules(cols), delta=delta)
                held = mean_nll(d_test.select_rules(cols), m.params.to_vector(), m.params.mask)
                if not math.isfinite(held):
                    raise FitError("non-finite held-out NLL")
            except FitError as exc:
                evaluations.append(Evaluation(subset, -math.inf, math.nan, math.nan, 0, (), state.iteration,
                                              error=str(exc)))
                state.evaluated[subset] = -math.inf
                continue
            wall = time.perf_counter() - t0 if cfg.record_wall_time else None
            evaluations.append(Evaluation(subset, -held, m.train_nll, held, m.epochs_run, m.params.alpha,
                                          state.iteration, wall))
            models[subset] = m
            state.record(subset, -held)
        if not batch:
            break
        surrogate.update(state.evaluated)
        state.inclusion_probs = surrogate.probs
        prob_history.append(state.inclusion_probs.tolist())
        log.info("iteration %d: %d evaluated, best %.6f", state.iteration, len(evaluations), state.best_score)

    if state.best_subset is None:
        errors = "; ".join(e.error or "" for e in evaluations)
        raise MiningError(f"no successful fit within budget: {errors}")
    return MiningReport(pool, names, evaluations, prob_history, state.best_subset, state.best_score,
                        models[state.best_subset], cfg, sampled, cache_hits)


def mine(corpus: Sequence[EventSequence], mining: MiningConfig = MiningConfig(),
         config: FitConfig = FitConfig(), encoding: EncodingConfig = EncodingConfig(),
         names: Sequence[str] | None = None, seed: int = 0) -> MiningReport | None:
    """Filter predicates, generate candidates, then search subsets.

    Returns ``None`` when no predicate survives filtering.
    """
    if not corpus:
        raise MiningError("empty corpus")
    K, target = corpus[0].num_types, corpus[0].target_type
    filt = filter_predicates(corpus, config, encoding, mining.filter_tolerance, mining.holdout_fraction)
    if not filt.retained:
        warnings.warn("no predicate reduced held-out loss; returning an empty rule set", RuntimeWarning)
        return None
    pool = generate_candidates(filt.retained, K, encoding.max_predicates, target,
                               mining.all_predicate_leaves, mining.pool_cap)
    k = min(mining.subset_size, len(pool))
    report = optimize_ruleset(pool, corpus, k, mining.budget, seed, config=config, encoding=encoding,
                              mining=mining, names=names)
    report.filter_result = filt
    return report
