"""Maximum-likelihood fitting and next-event prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .core import EventSequence, ModelParams, Rule, RuleSet, softplus_inverse
from .dsl import default_names, id_table, name_table, parse_rule, print_rule
from .encoders import default_delta
from .io import FORMAT_VERSION, corpus_fingerprint
from .likelihood import (GL_S, GL_W, Design, ForwardIntensity, IntensityContext, build_design,
                         evaluate_design, trigger_sets)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SURVIVAL_CUTOFF = 1e-6
MAX_GAPS = 1e6


class FitError(RuntimeError):
    pass


class NumericalFailure(FitError):
    """Non-finite objective or gradient during optimization."""


class DivergentPredictionError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    max_epochs: int = 500
    learning_rate: float = 0.05
    convergence_tol: float = 1e-9
    seed: int = 0
    l2_weight: float = 1e-4

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not self.learning_rate > 0 or not self.convergence_tol > 0:
            raise ValueError("learning_rate and convergence_tol must be positive")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")


@dataclass(frozen=True)
class EncodingConfig:
    """Fixed hyperparameters of the encoders.

    ``delta=None`` means 0.05 x the corpus mean inter-event gap. ``numeric_mask``
    is ``'rules'`` (types used by the rules) or ``'all'`` (every non-target type).
    """

    delta: float | None = None
    rule_decay_rate: float = 1.0
    num_decay_rate: float = 1.0
    max_predicates: int = 3
    integrate_to: str = "horizon"
    numeric: bool = True
    numeric_mask: str = "rules"

    def __post_init__(self):
        if self.delta is not None and not self.delta > 0:
            raise ValueError("delta must be positive")
        if not (self.rule_decay_rate > 0 and self.num_decay_rate > 0):
            raise ValueError("decay rates must be positive")
        if self.max_predicates not in (1, 2, 3):
            raise ValueError("max_predicates must be 1, 2 or 3")
        if self.integrate_to not in ("horizon", "last_event"):
            raise ValueError("integrate_to must be 'horizon' or 'last_event'")
        if self.numeric_mask not in ("rules", "all"):
            raise ValueError("numeric_mask must be 'rules' or 'all'")

    def resolve_delta(self, corpus: Sequence[EventSequence]) -> float:
        return self.delta if self.delta is not None else default_delta(corpus)


@dataclass(frozen=True, eq=False)
class FittedModel:
    rules: RuleSet
    params: ModelParams
    num_types: int
    target_type: int
    train_nll: float
    epochs_run: int
    config: FitConfig
    encoding: EncodingConfig
    names: tuple[str, ...]
    corpus: dict = field(default_factory=dict)
    history: tuple[float, ...] = ()

    def context(self, sequence: EventSequence) -> IntensityContext:
        return IntensityContext(sequence, list(self.rules), self.params,
                                integrate_to=self.encoding.integrate_to)

    def rule_texts(self) -> list[str]:
        ids = id_table(list(self.names))
        return [print_rule(r, ids) for r in self.rules]

    def to_dict(self) -> dict:
        p = self.params
        return {
            "format_version": FORMAT_VERSION,
            "kind": "hrtpp-model",
            "num_types": self.num_types,
            "target_type": self.target_type,
            "names": list(self.names),
            "rules": self.rule_texts(),
            "params": {"lambda0": p.lambda0, "alpha": list(p.alpha), "beta": list(p.beta),
                       "gamma_raw": p.gamma_raw, "mask": list(p.mask)},
            "hyperparameters": {"delta": p.delta, "rule_decay_rate": p.rule_decay_rate,
                                "num_decay_rate": p.num_decay_rate},
            "encoding": asdict(self.encoding),
            "fit_config": asdict(self.config),
            "train_nll": self.train_nll,
            "epochs_run": self.epochs_run,
            "history": list(self.history),
            "corpus": dict(self.corpus),
        }

    @classmethod
    def from_dict(cls, d: dict, corpus: Sequence[EventSequence] | None = None,
                  tol: float = 1e-9) -> "FittedModel":
        if d.get("format_version") != FORMAT_VERSION or d.get("kind") != "hrtpp-model":
            raise ValueError("not a supported model document")
        names = list(d["names"])
        enc = EncodingConfig(**d["encoding"])
        table = name_table(names)
        rules = RuleSet([parse_rule(t, table, enc.max_predicates) for t in d["rules"]],
                        target=d["target_type"], max_predicates=enc.max_predicates)
        pp, hp = d["params"], d["hyperparameters"]
        params = ModelParams(pp["lambda0"], tuple(pp["alpha"]), tuple(pp["beta"]), pp["gamma_raw"],
                             hp["delta"], hp["rule_decay_rate"], hp["num_decay_rate"], tuple(pp["mask"]))
        model = cls(rules, params, d["num_types"], d["target_type"], d["train_nll"], d["epochs_run"],
                    FitConfig(**d["fit_config"]), enc, tuple(names), dict(d.get("corpus", {})),
                    tuple(d.get("history", ())))
        if corpus is not None:
            got = corpus_nll(model, corpus)
            if abs(got - model.train_nll) > tol * max(1.0, abs(got)):
                raise ValueError(f"stored train_nll {model.train_nll!r} does not match recomputed {got!r}")
        return model


def _check_corpus(corpus: Sequence[EventSequence], rules: Sequence[Rule]) -> tuple[int, int]:
    if not corpus:
        raise FitError("empty corpus")
    K, target = corpus[0].num_types, corpus[0].target_type
    for s in corpus:
        if (s.num_types, s.target_type) != (K, target):
            raise FitError("all sequences must share num_types and target_type")
    for r in rules:
        if r.target != target:
            raise FitError(f"rule target {r.target} differs from corpus target {target}")
        if max(r.predicates) > K:
            raise FitError(f"rule uses a predicate outside [1, {K}]")
    return K, target


def numeric_mask(rules: Sequence[Rule], K: int, target: int, encoding: EncodingConfig) -> tuple[bool, ...]:
    if not encoding.numeric:
        return (False,) * K
    p = ModelParams.initial(rules, K, all_numeric=encoding.numeric_mask == "all", target_type=target)
    return p.mask


def initial_params(corpus: Sequence[EventSequence], rules: Sequence[Rule], encoding: EncodingConfig,
                   delta: float) -> ModelParams:
    """Zero weights, gamma = 1, and softplus(lambda0) equal to the empirical target rate."""
    K, target = corpus[0].num_types, corpus[0].target_type
    count = sum(len(s.target_times()) for s in corpus)
    total = sum(s.horizon if encoding.integrate_to == "horizon" else
                (s.target_times()[-1] if len(s.target_times()) else 0.0) for s in corpus)
    rate = count / total if count and total > 0 else 1e-3
    return ModelParams(softplus_inverse(rate), (0.0,) * len(rules), (0.0,) * K, 0.0, delta,
                       encoding.rule_decay_rate, encoding.num_decay_rate,
                       numeric_mask(rules, K, target, encoding))


def corpus_design(corpus: Sequence[EventSequence], rules: Sequence[Rule], delta: float,
                  encoding: EncodingConfig) -> Design:
    return Design.concat([build_design(s, rules, delta=delta, rule_rate=encoding.rule_decay_rate,
                                       num_rate=encoding.num_decay_rate,
                                       integrate_to=encoding.integrate_to) for s in corpus])


def mean_nll(design: Design, theta: np.ndarray, mask: Sequence[bool]) -> float:
    lt, it, _ = evaluate_design(design, theta, np.asarray(mask, dtype=float), want_grad=False)
    return float(np.mean(lt + it))


def per_sequence_nll(design: Design, theta: np.ndarray, mask: Sequence[bool]) -> np.ndarray:
    lt, it, _ = evaluate_design(design, theta, np.asarray(mask, dtype=float), want_grad=False)
    return lt + it


def _param_name(i: int, J: int, K: int) -> str:
    if i == 0:
        return "lambda0"
    if i <= J:
        return f"alpha[{i - 1}]"
    if i <= J + K:
        return f"beta[{i - J - 1}]"
    return "gamma_raw"


def optimize_design(design: Design, theta0: np.ndarray, mask: Sequence[bool],
                    config: FitConfig) -> tuple[np.ndarray, list[float], int]:
    """Adam on mean NLL + l2 * |(alpha, beta)|^2, rejecting steps that increase it.

    A rejected step halves the step scale and drops the first moment, so the
    retry follows the preconditioned gradient, which is a descent direction.
    The recorded objective never increases.
    """
    J, K = design.num_rules, design.log_num.shape[1]
    mask_arr = np.asarray(mask, dtype=float)
    w = np.full(design.num_seqs, 1.0 / design.num_seqs)
    reg = np.zeros_like(theta0)
    reg[1:1 + J + K] = 1.0

    def objective(theta):
        lt, it, g = evaluate_design(design, theta, mask_arr, seq_weights=w)
        f = float(np.dot(w, lt + it)) + config.l2_weight * float(np.sum(reg * theta ** 2))
        return f, g + 2.0 * config.l2_weight * reg * theta

    theta = np.array(theta0, dtype=float)
    f, g = objective(theta)
    if not np.isfinite(f):
        raise NumericalFailure("non-finite objective at the initial parameters (epoch 0)")
    history = [f]
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    step_count, scale, epoch = 0, 1.0, 0
    for epoch in range(1, config.max_epochs + 1):
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            raise NumericalFailure(f"non-finite gradient for {_param_name(bad[0], J, K)} at epoch {epoch}")
        t = step_count + 1
        m_new = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v_new = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        mhat = m_new / (1 - ADAM_BETA1 ** t)
        vhat = v_new / (1 - ADAM_BETA2 ** t)
        cand = theta - config.learning_rate * scale * mhat / (np.sqrt(vhat) + ADAM_EPS)
        bad = np.flatnonzero(~np.isfinite(cand))
        if bad.size:
            raise NumericalFailure(f"non-finite value for {_param_name(bad[0], J, K)} at epoch {epoch}")
        fc, gc = objective(cand)
        if np.isfinite(fc) and fc <= f:
            rel = (f - fc) / max(abs(f), 1.0)
            theta, f, g, m, v, step_count = cand, fc, gc, m_new, v_new, t
            scale = min(1.0, scale * 1.5)
            history.append(f)
            if rel < config.convergence_tol:
                break
        else:
            # stale momentum can point uphill; no step length along it helps
            m = np.zeros_like(theta)
            scale *= 0.5
            history.append(f)
            if scale < 1e-10:
                break
    return theta, history, epoch


def fit(corpus: Sequence[EventSequence], rules: Sequence[Rule] | RuleSet,
        config: FitConfig = FitConfig(), encoding: EncodingConfig = EncodingConfig(), *,
        names: Sequence[str] | None = None, design: Design | None = None,
        delta: float | None = None) -> FittedModel:
    """Fit Theta = (lambda0, alpha, beta, gamma) by minimizing mean per-sequence NLL.

    ``design`` may be passed to reuse precomputed features (its rule columns
    must match ``rules``); ``delta`` overrides ``encoding.delta``.
    """
    rules = rules if isinstance(rules, RuleSet) else RuleSet(rules, max_predicates=encoding.max_predicates)
    K, target = _check_corpus(corpus, rules)
    if rules.target is None:
        rules.target = target
    if delta is None:
        delta = encoding.resolve_delta(corpus)
    p0 = initial_params(corpus, rules, encoding, delta)
    if design is None:
        design = corpus_design(corpus, rules, delta, encoding)
    theta, history, epochs = optimize_design(design, p0.to_vector(), p0.mask, config) \
        if config.max_epochs > 0 else (p0.to_vector(), None, 0)
    params = p0.with_vector(theta)
    train = mean_nll(design, theta, params.mask)
    if history is None:
        history = [train]
    log.debug("fit: %d rules, %d epochs, train NLL %.6f", len(rules), epochs, train)
    return FittedModel(rules, params, K, target, train, epochs, config, encoding,
                       tuple(names) if names is not None else tuple(default_names(K)),
                       corpus_fingerprint(corpus), tuple(history))


def corpus_nll(model: FittedModel, corpus: Sequence[EventSequence]) -> float:
    design = corpus_design(corpus, list(model.rules), model.params.delta, model.encoding)
    return mean_nll(design, model.params.to_vector(), model.params.mask)


# -- prediction ---------------------------------------------------------------

def _forward(model: FittedModel, history: EventSequence, t_from: float) -> ForwardIntensity:
    if len(history) and history.times[-1] > t_from:
        raise ValueError("t_from must be at or after the last history event")
    return ForwardIntensity(model.params, list(model.rules), history, t_from)


def _gl(fwd: ForwardIntensity, a: float, b: float) -> float:
    h = b - a
    return float(h * np.dot(GL_W, fwd(a + h * GL_S))) if h > 0 else 0.0


def _panel_width(fwd: ForwardIntensity, s: float) -> float:
    return min(0.5 / fwd.bound(s), 1.0 / fwd.fastest_rate)


def cumulative_intensity(fwd: ForwardIntensity, s_end: float) -> float:
    """``int_0^s_end lambda(t_from + u) du``."""
    total, s = 0.0, 0.0
    while s < s_end:
        b = min(s + _panel_width(fwd, s), s_end)
        total += _gl(fwd, s, b)
        s = b
    return total


def next_event_density(model: FittedModel, history: EventSequence, t_from: float, t_query: float) -> float:
    """``lambda(t_query) exp(-int_{t_from}^{t_query} lambda)`` with no new covariates after ``t_from``."""
    if t_query < t_from:
        raise ValueError("t_query must be >= t_from")
    fwd = _forward(model, history, t_from)
    s = t_query - t_from
    return float(fwd(s)) * math.exp(-cumulative_intensity(fwd, s))


TRANSIENT_EPS = 1e-12


def _panel_edges(fwd: ForwardIntensity, s: float, count: int, s_end: float) -> np.ndarray:
    # bound() is non-increasing, so the width chosen at s stays valid further on
    return np.minimum(s + _panel_width(fwd, s) * np.arange(count + 1), s_end)


def _transient_end(fwd: ForwardIntensity) -> float:
    """Offset after which both decaying terms are below ``TRANSIENT_EPS``; the
    intensity is then constant at its asymptote to working precision."""
    p = fwd.params
    ends = [math.log(abs(c) / TRANSIENT_EPS) / w
            for c, w in ((fwd.R, p.rule_decay_rate), (fwd.N, p.num_decay_rate)) if abs(c) > TRANSIENT_EPS]
    return max(ends, default=0.0)


def _reference_limit(fwd: ForwardIntensity) -> float:
    return MAX_GAPS / max(float(fwd(0.0)), fwd.asymptote())


def _survival_chunks(fwd: ForwardIntensity, s_end: float, chunk: int = 32):
    """Yield arrays ``(a, b, Lambda at the GL nodes of each panel, Lambda(b))`` on ``[0, s_end]``.

    Stops after the first panel where survival drops below the cutoff. One
    intensity call per chunk covers the outer nodes and the nested nodes that
    give the cumulative at each node.
    """
    s, lam_a = 0.0, 0.0
    inner = GL_S[:, None] * GL_S[None, :]
    cut = -math.log(SURVIVAL_CUTOFF)
    while s < s_end:
        edges = _panel_edges(fwd, s, chunk, s_end)
        a, h = edges[:-1], np.diff(edges)
        outer = fwd(a[:, None] + h[:, None] * GL_S)
        nested = fwd(a[:, None, None] + h[:, None, None] * inner)
        lam_b = lam_a + np.cumsum(h * (outer @ GL_W))
        starts = np.concatenate(([lam_a], lam_b[:-1]))
        lam_nodes = starts[:, None] + h[:, None] * GL_S * (nested @ GL_W)
        done = np.flatnonzero(lam_b > cut)
        stop = done[0] + 1 if done.size else len(a)
        yield a[:stop], edges[1:stop + 1], lam_nodes[:stop], lam_b[:stop]
        if done.size:
            return
        s, lam_a = edges[-1], lam_b[-1]


def _check_tail(fwd: ForwardIntensity, s_c: float, lam_c: float) -> float:
    """Asymptotic rate past ``s_c``; raises if survival would outlast the reference limit."""
    lam_inf = fwd.asymptote()
    cut = -math.log(SURVIVAL_CUTOFF)
    if lam_inf <= 0 or s_c + max(cut - lam_c, 0.0) / lam_inf > _reference_limit(fwd):
        raise DivergentPredictionError(
            f"survival stays above {SURVIVAL_CUTOFF:g} beyond {MAX_GAPS:.0e} mean inter-event gaps "
            f"(asymptotic intensity {lam_inf:.3g})")
    return lam_inf


def expected_wait(fwd: ForwardIntensity) -> float:
    """``E[tau - t_from] = int_0^inf S(s) ds``.

    Quadrature covers the transient; past it the intensity is constant and
    the remaining integral is ``S / lambda`` exactly.
    """
    s_c = _transient_end(fwd)
    total, b_last, lam_last = 0.0, 0.0, 0.0
    for a, b, lam_nodes, lam_b in _survival_chunks(fwd, s_c):
        total += float(np.dot(b - a, np.exp(-lam_nodes) @ GL_W))
        b_last, lam_last = float(b[-1]), float(lam_b[-1])
    if lam_last > -math.log(SURVIVAL_CUTOFF):
        return total + math.exp(-lam_last) / float(fwd(b_last))
    return total + math.exp(-lam_last) / _check_tail(fwd, s_c, lam_last)


def predict_next_time(model: FittedModel, history: EventSequence, t_from: float) -> float:
    """Conditional expectation of the next target time after ``t_from``."""
    return t_from + expected_wait(_forward(model, history, t_from))


def sample_next_time(model: FittedModel, history: EventSequence, t_from: float,
                     rng: np.random.Generator) -> float:
    """Draw the next target time by inverting the survival function."""
    fwd = _forward(model, history, t_from)
    e = rng.exponential()
    s_c = _transient_end(fwd)
    s, lam = 0.0, 0.0
    while s < s_c:
        b = min(s + _panel_width(fwd, s), s_c)
        lam_b = lam + _gl(fwd, s, b)
        if lam_b >= e:
            return t_from + brentq(lambda x: lam + _gl(fwd, s, x) - e, s, b, xtol=1e-12)
        s, lam = b, lam_b
    return t_from + s_c + (e - lam) / _check_tail(fwd, s_c, lam)


def history_until(sequence: EventSequence, t: float) -> EventSequence:
    return sequence.truncate(t, inclusive=True)
