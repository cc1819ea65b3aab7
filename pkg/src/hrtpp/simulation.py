"""Synthetic corpora from a ground-truth model.

Covariate types are independent homogeneous Poisson streams with i.i.d.
values; target events are drawn by Ogata thinning against the model intensity.
Because the target never appears in a rule body, the target intensity is a
deterministic function of the covariate path, and between covariate/trigger
times each decayed component only shrinks toward zero. The thinning bound
``softplus(lambda0 + max(R, 0) + max(N, 0))`` taken at the current candidate
point therefore dominates the intensity until the next jump.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import EventSequence, InvalidRuleError, ModelParams, Rule, RuleSet, recompute_mask, validate_rule
from .dsl import default_names, format_rules_text, id_table, name_table, parse_rules_text
from .io import FORMAT_VERSION, stable_hash
from .likelihood import softplus, trigger_sets


class ScenarioError(ValueError):
    pass


class ThinningBoundError(AssertionError):
    """The dominating rate fell below the intensity; indicates a bound bug."""


@dataclass(frozen=True)
class ValueDist:
    """Normal values; ``std == 0`` gives the constant ``mean``.

    The standard-normal default keeps the numeric channel uninformative unless
    beta is planted, so it cannot stand in for a rule.
    """

    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    num_types: int
    target_type: int
    rates: Mapping[int, float]
    rules: RuleSet
    alpha: tuple[float, ...]
    lambda0: float
    horizon: float
    num_sequences: int = 1
    seed: int = 0
    beta: tuple[float, ...] | None = None
    gamma: float = 1.0
    delta: float = 0.1
    rule_decay_rate: float = 1.0
    num_decay_rate: float = 1.0
    values: Mapping[int, ValueDist] = field(default_factory=dict)
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        K = self.num_types
        if K < 1 or not 1 <= self.target_type <= K:
            raise ScenarioError("need num_types >= 1 and target_type in [1, num_types]")
        for k, r in self.rates.items():
            if not 1 <= k <= K or k == self.target_type:
                raise ScenarioError(f"background rate given for invalid type {k}")
            if not (math.isfinite(r) and r > 0):
                raise ScenarioError(f"rate for type {k} must be positive, got {r}")
        for name in ("gamma", "delta", "rule_decay_rate", "num_decay_rate"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"{name} must be positive")
        if not (math.isfinite(self.horizon) and self.horizon >= 0):
            raise ScenarioError("horizon must be >= 0")
        if self.num_sequences < 1:
            raise ScenarioError("num_sequences must be >= 1")
        if len(self.alpha) != len(self.rules):
            raise ScenarioError("one alpha per planted rule is required")
        beta = tuple(self.beta) if self.beta is not None else (0.0,) * K
        if len(beta) != K:
            raise ScenarioError("beta needs one entry per event type")
        object.__setattr__(self, "beta", beta)
        for r in self.rules:
            try:
                validate_rule(r, K, self.rules.max_predicates)
            except InvalidRuleError as exc:
                raise ScenarioError(str(exc)) from None
            if r.target != self.target_type:
                raise ScenarioError("planted rules must target target_type")
        mask = recompute_mask(self.rules, K)
        for k, b in enumerate(beta, start=1):
            if b and not mask[k - 1]:
                raise ScenarioError(f"beta for type {k} has no effect: the numeric mask only covers "
                                    "leaves of planted rules")
        for k, d in self.values.items():
            if d.std < 0:
                raise ScenarioError(f"value std for type {k} must be >= 0")
        names = tuple(self.names) if self.names else tuple(default_names(K))
        if len(names) != K:
            raise ScenarioError("names needs one entry per event type")
        object.__setattr__(self, "names", names)

    @property
    def true_params(self) -> ModelParams:
        return ModelParams(self.lambda0, self.alpha, self.beta,
                           math.log(self.gamma), self.delta, self.rule_decay_rate, self.num_decay_rate,
                           tuple(recompute_mask(self.rules, self.num_types)))

    def value_dist(self, k: int) -> ValueDist:
        return self.values.get(k, ValueDist())

    def rules_text(self) -> str:
        return format_rules_text(self.rules, id_table(list(self.names)), self.alpha)

    def to_dict(self) -> dict:
        return {
            "num_types": self.num_types, "target_type": self.target_type,
            "names": list(self.names),
            "rates": {str(k): float(v) for k, v in sorted(self.rates.items())},
            "values": {str(k): {"mean": d.mean, "std": d.std} for k, d in sorted(self.values.items())},
            "rules": self.rules_text().splitlines(),
            "beta": list(self.beta), "lambda0": self.lambda0, "gamma": self.gamma,
            "delta": self.delta, "rule_decay_rate": self.rule_decay_rate,
            "num_decay_rate": self.num_decay_rate, "horizon": self.horizon,
            "num_sequences": self.num_sequences, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioSpec":
        allowed = {"num_types", "target_type", "names", "rates", "values", "rules", "beta", "lambda0",
                   "gamma", "delta", "rule_decay_rate", "num_decay_rate", "horizon", "num_sequences",
                   "seed", "max_predicates"}
        unknown = set(d) - allowed
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            K = int(d["num_types"])
            names = list(d.get("names") or default_names(K))
            rules_src = d.get("rules", [])
            text = rules_src if isinstance(rules_src, str) else "\n".join(rules_src)
            parsed = parse_rules_text(text, name_table(names), int(d.get("max_predicates", 3)))
            if any(w is None for _, w in parsed):
                raise ScenarioError("every planted rule needs a '# weight=<alpha>' annotation")
            rules = RuleSet([r for r, _ in parsed], target=int(d["target_type"]),
                            max_predicates=int(d.get("max_predicates", 3)))
            if len(rules) != len(parsed):
                raise ScenarioError("duplicate planted rules")
            return cls(
                num_types=K, target_type=int(d["target_type"]),
                rates={int(k): float(v) for k, v in dict(d.get("rates", {})).items()},
                rules=rules, alpha=tuple(w for _, w in parsed), lambda0=float(d["lambda0"]),
                horizon=float(d["horizon"]), num_sequences=int(d.get("num_sequences", 1)),
                seed=int(d.get("seed", 0)), beta=d.get("beta"), gamma=float(d.get("gamma", 1.0)),
                delta=float(d.get("delta", 0.1)),
                rule_decay_rate=float(d.get("rule_decay_rate", 1.0)),
                num_decay_rate=float(d.get("num_decay_rate", 1.0)),
                values={int(k): ValueDist(float(v.get("mean", 0.0)), float(v.get("std", 1.0)))
                        for k, v in dict(d.get("values", {})).items()},
                names=tuple(names))
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError, InvalidRuleError) as exc:
            raise ScenarioError(f"invalid scenario: {exc}") from None

    def spec_hash(self) -> str:
        return stable_hash(self.to_dict())


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def simulate_covariates(spec: ScenarioSpec, rng: np.random.Generator) -> EventSequence:
    T = spec.horizon
    times, types, values = [], [], []
    for k in sorted(spec.rates):
        n = rng.poisson(spec.rates[k] * T)
        d = spec.value_dist(k)
        times.append(np.sort(rng.uniform(0.0, T, n)))
        types.append(np.full(n, k, dtype=np.int64))
        values.append(rng.normal(d.mean, d.std, n) if d.std > 0 else np.full(n, d.mean))
    t = np.concatenate(times) if times else np.zeros(0)
    order = np.argsort(t, kind="stable")
    k = np.concatenate(types)[order] if types else np.zeros(0, dtype=np.int64)
    v = np.concatenate(values)[order] if values else np.zeros(0)
    return EventSequence(t[order], k, v, T, spec.num_types, spec.target_type)


def intensity_jumps(spec_params: ModelParams, covariates: EventSequence,
                    triggers: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Times at which the pre-activation jumps, with rule-part and numeric-part jump sizes."""
    t_parts = [covariates.times]
    dn = np.array([spec_params.beta[k - 1] * v if spec_params.mask[k - 1] else 0.0
                   for k, v in zip(covariates.types, covariates.values)], dtype=float)
    r_parts = [np.zeros(len(covariates))]
    n_parts = [dn]
    for a, trig in zip(spec_params.alpha, triggers):
        t_parts.append(trig)
        r_parts.append(np.full(len(trig), a))
        n_parts.append(np.zeros(len(trig)))
    t = np.concatenate(t_parts)
    order = np.argsort(t, kind="stable")
    return t[order], np.concatenate(r_parts)[order], np.concatenate(n_parts)[order]


def thin_target(params: ModelParams, jump_t: np.ndarray, jump_r: np.ndarray, jump_n: np.ndarray,
                t_start: float, t_end: float, rng: np.random.Generator,
                first_only: bool = False, R0: float = 0.0, N0: float = 0.0) -> list[float]:
    """Ogata thinning on ``(t_start, t_end]`` given pre-activation jumps.

    ``R0``/``N0`` are the rule and numeric parts at ``t_start``; only jumps
    after ``t_start`` are applied. With ``first_only`` returns at most one time
    (``t_end`` may then be ``inf``).
    """
    lam0, gamma = params.lambda0, params.gamma
    wr, wn = params.rule_decay_rate, params.num_decay_rate
    out = []
    i = int(np.searchsorted(jump_t, t_start, side="right"))
    n = len(jump_t)
    t, t_ref, R, N = t_start, t_start, R0, N0
    while True:
        nxt = float(jump_t[i]) if i < n else t_end
        nxt = min(nxt, t_end)
        r = R * math.exp(-wr * (t - t_ref))
        q = N * math.exp(-wn * (t - t_ref))
        bound = softplus(lam0 + max(r, 0.0) + max(q, 0.0), gamma)
        t_new = t + rng.exponential(1.0 / bound)
        if t_new >= nxt:
            if nxt >= t_end:
                return out
            # absorb every jump at this instant
            R = R * math.exp(-wr * (nxt - t_ref))
            N = N * math.exp(-wn * (nxt - t_ref))
            while i < n and jump_t[i] == nxt:
                R += jump_r[i]
                N += jump_n[i]
                i += 1
            t = t_ref = nxt
            continue
        t = t_new
        lam = softplus(lam0 + R * math.exp(-wr * (t - t_ref)) + N * math.exp(-wn * (t - t_ref)), gamma)
        if lam > bound * (1.0 + 1e-12):
            raise ThinningBoundError(f"intensity {lam} exceeds bound {bound} at t={t}")
        if rng.uniform() * bound <= lam:
            out.append(t)
            if first_only:
                return out


def simulate_sequence(spec: ScenarioSpec, seed: int | np.random.Generator) -> EventSequence:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if spec.horizon == 0:
        return EventSequence(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0), 0.0,
                             spec.num_types, spec.target_type)
    cov = simulate_covariates(spec, rng)
    params = spec.true_params
    trig = trigger_sets(cov, list(spec.rules), spec.delta)
    jt, jr, jn = intensity_jumps(params, cov, trig)
    target = np.array(thin_target(params, jt, jr, jn, 0.0, spec.horizon, rng))
    t = np.concatenate([cov.times, target])
    k = np.concatenate([cov.types, np.full(len(target), spec.target_type, dtype=np.int64)])
    v = np.concatenate([cov.values, np.zeros(len(target))])
    order = np.argsort(t, kind="stable")
    return EventSequence(t[order], k[order], v[order], spec.horizon, spec.num_types, spec.target_type)


def simulate_indexed(spec: ScenarioSpec, index: int) -> EventSequence:
    """Sequence ``index`` of the corpus for ``spec``; regenerates independently."""
    return simulate_sequence(spec, sequence_rng(spec.seed, index))


def simulate_corpus(spec: ScenarioSpec) -> tuple[list[EventSequence], dict]:
    corpus = [simulate_indexed(spec, i) for i in range(spec.num_sequences)]
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "hrtpp-corpus-manifest",
        "spec": spec.to_dict(),
        "spec_hash": spec.spec_hash(),
        "names": list(spec.names),
        "true_rules": spec.rules_text().splitlines(),
        "num_sequences": spec.num_sequences,
        "seed_derivation": "numpy SeedSequence([seed, index])",
    }
    return corpus, manifest
