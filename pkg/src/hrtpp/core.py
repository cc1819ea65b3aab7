"""Domain types: events, sequences, rules and model parameters."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_MAX_PREDICATES = 3


class InvalidRuleError(ValueError):
    """A rule violates a structural constraint (leaf range, target use, length)."""


class InvalidSequenceError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    time: float
    event_type: int
    value: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time >= 0):
            raise InvalidSequenceError(f"event time must be finite and >= 0, got {self.time}")
        if self.event_type < 1:
            raise InvalidSequenceError(f"event type must be >= 1, got {self.event_type}")


@dataclass(frozen=True, eq=False)
class EventSequence:
    """Time-sorted marked events observed on ``[0, horizon]``.

    Stored column-wise as read-only numpy arrays; ``events`` rebuilds the
    per-event view on demand.
    """

    times: np.ndarray
    types: np.ndarray
    values: np.ndarray
    horizon: float
    num_types: int
    target_type: int

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        types = np.asarray(self.types, dtype=np.int64).reshape(-1)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if not (len(times) == len(types) == len(values)):
            raise InvalidSequenceError("times, types and values must have equal length")
        if self.num_types < 1:
            raise InvalidSequenceError("num_types must be positive")
        if not 1 <= self.target_type <= self.num_types:
            raise InvalidSequenceError(f"target_type {self.target_type} outside [1, {self.num_types}]")
        if not (math.isfinite(self.horizon) and self.horizon >= 0):
            raise InvalidSequenceError(f"horizon must be finite and >= 0, got {self.horizon}")
        if len(times):
            if not np.all(np.isfinite(times)) or times.min() < 0:
                raise InvalidSequenceError("event times must be finite and >= 0")
            if np.any(np.diff(times) < 0):
                raise InvalidSequenceError("events must be sorted by time")
            if times[-1] > self.horizon:
                raise InvalidSequenceError("horizon must be >= the last event time")
            if types.min() < 1 or types.max() > self.num_types:
                raise InvalidSequenceError(f"event types must lie in [1, {self.num_types}]")
            if not np.all(np.isfinite(values)):
                raise InvalidSequenceError("event values must be finite")
        for arr in (times, types, values):
            arr.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "types", types)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "horizon", float(self.horizon))

    @classmethod
    def from_events(cls, events: Iterable[Event], horizon: float, num_types: int,
                    target_type: int) -> "EventSequence":
        events = list(events)
        return cls(
            times=np.array([e.time for e in events], dtype=float),
            types=np.array([e.event_type for e in events], dtype=np.int64),
            values=np.array([e.value for e in events], dtype=float),
            horizon=horizon, num_types=num_types, target_type=target_type,
        )

    @property
    def events(self) -> list[Event]:
        return [Event(float(t), int(k), float(v)) for t, k, v in zip(self.times, self.types, self.values)]

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (self.horizon == other.horizon and self.num_types == other.num_types
                and self.target_type == other.target_type
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.types, other.types)
                and np.array_equal(self.values, other.values))

    __hash__ = None

    def times_of(self, event_type: int) -> np.ndarray:
        return self.times[self.types == event_type]

    def target_times(self) -> np.ndarray:
        return self.times_of(self.target_type)

    def truncate(self, t: float, inclusive: bool = True, horizon: float | None = None) -> "EventSequence":
        """Keep events at or before ``t`` (strictly before if not inclusive)."""
        keep = self.times <= t if inclusive else self.times < t
        return EventSequence(self.times[keep], self.types[keep], self.values[keep],
                             horizon=max(t, 0.0) if horizon is None else horizon,
                             num_types=self.num_types, target_type=self.target_type)


class RelationKind(enum.Enum):
    AND = "and"
    BEFORE = "before"
    EQUAL = "equal"

    @property
    def symmetric(self) -> bool:
        return self is not RelationKind.BEFORE


@dataclass(frozen=True)
class Pred:
    """Leaf predicate X_k."""

    event_type: int


@dataclass(frozen=True)
class Relation:
    kind: RelationKind
    left: "Body"
    right: "Body"


Body = Pred | Relation


def body_key(body: Body) -> tuple:
    """Total order on rule bodies: leaves first, then by relation and operands."""
    if isinstance(body, Pred):
        return (0, body.event_type)
    return (1, body.kind.value, body_key(body.left), body_key(body.right))


def leaves(body: Body) -> list[int]:
    if isinstance(body, Pred):
        return [body.event_type]
    return leaves(body.left) + leaves(body.right)


@dataclass(frozen=True)
class Rule:
    body: Body
    target: int

    @property
    def predicates(self) -> list[int]:
        return leaves(self.body)

    def __len__(self) -> int:
        return len(self.predicates)

    def key(self) -> tuple:
        return (self.target, body_key(canonicalize_body(self.body)))


def canonicalize_body(body: Body) -> Body:
    if isinstance(body, Pred):
        return body
    left = canonicalize_body(body.left)
    right = canonicalize_body(body.right)
    if body.kind.symmetric and body_key(right) < body_key(left):
        left, right = right, left
    return Relation(body.kind, left, right)


def canonicalize_rule(rule: Rule) -> Rule:
    """Sort operands of the symmetric relations (``and``, ``equal``); idempotent."""
    return Rule(canonicalize_body(rule.body), rule.target)


def validate_rule(rule: Rule, num_types: int | None = None,
                  max_predicates: int = DEFAULT_MAX_PREDICATES) -> None:
    preds = rule.predicates
    if not 1 <= len(preds) <= max_predicates:
        raise InvalidRuleError(f"rule has {len(preds)} predicates, allowed 1..{max_predicates}")
    if rule.target in preds:
        raise InvalidRuleError(f"target X{rule.target} appears in the rule body")
    if num_types is not None:
        bad = [k for k in preds + [rule.target] if not 1 <= k <= num_types]
        if bad:
            raise InvalidRuleError(f"event types {bad} outside [1, {num_types}]")


class RuleSet(Sequence[Rule]):
    """Deduplicated, canonical rules sharing one target."""

    def __init__(self, rules: Iterable[Rule] = (), target: int | None = None,
                 max_size: int | None = None, max_predicates: int = DEFAULT_MAX_PREDICATES):
        self.target = target
        self.max_size = max_size
        self.max_predicates = max_predicates
        self._rules: list[Rule] = []
        self._keys: set[tuple] = set()
        for r in rules:
            self.add(r)

    def add(self, rule: Rule) -> bool:
        """Insert a rule; returns False (no-op) for a duplicate under canonical equality."""
        rule = canonicalize_rule(rule)
        validate_rule(rule, max_predicates=self.max_predicates)
        if self.target is None:
            self.target = rule.target
        elif rule.target != self.target:
            raise InvalidRuleError(f"rule target {rule.target} differs from rule set target {self.target}")
        key = rule.key()
        if key in self._keys:
            return False
        if self.max_size is not None and len(self._rules) >= self.max_size:
            raise InvalidRuleError(f"rule set is limited to {self.max_size} rules")
        self._rules.append(rule)
        self._keys.add(key)
        return True

    def __getitem__(self, i):
        return self._rules[i]

    def __len__(self) -> int:
        return len(self._rules)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RuleSet):
            return NotImplemented
        return self._rules == other._rules

    def __repr__(self) -> str:
        return f"RuleSet({self._rules!r})"

    def keys(self) -> set[tuple]:
        return set(self._keys)

    def subset(self, indices: Iterable[int]) -> "RuleSet":
        return RuleSet((self._rules[i] for i in indices), target=self.target,
                       max_predicates=self.max_predicates)


def recompute_mask(rules: Iterable[Rule], num_types: int) -> list[bool]:
    """m_k is true iff X_k is a leaf of some rule."""
    mask = [False] * num_types
    for rule in rules:
        for k in rule.predicates:
            if not 1 <= k <= num_types:
                raise InvalidRuleError(f"predicate X{k} outside [1, {num_types}]")
            mask[k - 1] = True
    return mask


def softplus_inverse(y: float, gamma: float = 1.0) -> float:
    if y <= 0:
        raise ValueError("softplus range is (0, inf)")
    z = y / gamma
    return gamma * (z + math.log(-math.expm1(-z)))


@dataclass(frozen=True)
class ModelParams:
    """Learnable weights plus the fixed encoding hyperparameters.

    ``gamma`` is ``exp(gamma_raw)``, so it is positive by construction.
    """

    lambda0: float
    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    gamma_raw: float
    delta: float
    rule_decay_rate: float
    num_decay_rate: float
    mask: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "mask", tuple(bool(m) for m in self.mask))
        if len(self.mask) != len(self.beta):
            raise ValueError("mask and beta must both have one entry per event type")
        for name in ("delta", "rule_decay_rate", "num_decay_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def gamma(self) -> float:
        return math.exp(self.gamma_raw)

    @property
    def num_types(self) -> int:
        return len(self.beta)

    @classmethod
    def initial(cls, rules: Sequence[Rule], num_types: int, *, lambda0: float = 0.0,
                delta: float = 0.1, rule_decay_rate: float = 1.0, num_decay_rate: float = 1.0,
                all_numeric: bool = False, target_type: int | None = None) -> "ModelParams":
        """Zero weights; mask from the rules, or every non-target type when ``all_numeric``."""
        if all_numeric:
            mask = [k != target_type for k in range(1, num_types + 1)]
        else:
            mask = recompute_mask(rules, num_types)
        return cls(lambda0=lambda0, alpha=(0.0,) * len(rules), beta=(0.0,) * num_types,
                   gamma_raw=0.0, delta=delta, rule_decay_rate=rule_decay_rate,
                   num_decay_rate=num_decay_rate, mask=tuple(mask))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.lambda0], self.alpha, self.beta, [self.gamma_raw]])

    def with_vector(self, theta: np.ndarray) -> "ModelParams":
        j, k = len(self.alpha), len(self.beta)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (2 + j + k,):
            raise ValueError(f"expected parameter vector of length {2 + j + k}")
        return ModelParams(float(theta[0]), tuple(theta[1:1 + j]), tuple(theta[1 + j:1 + j + k]),
                           float(theta[-1]), self.delta, self.rule_decay_rate,
                           self.num_decay_rate, self.mask)

    def replace(self, **changes) -> "ModelParams":
        fields = dict(lambda0=self.lambda0, alpha=self.alpha, beta=self.beta,
                      gamma_raw=self.gamma_raw, delta=self.delta,
                      rule_decay_rate=self.rule_decay_rate, num_decay_rate=self.num_decay_rate,
                      mask=self.mask)
        fields.update(changes)
        return ModelParams(**fields)
