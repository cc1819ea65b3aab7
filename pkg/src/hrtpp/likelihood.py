"""Conditional intensity, negative log-likelihood and its analytic gradient.

The pre-activation is linear in ``(lambda0, alpha, beta)``::

    x(t) = lambda0 + sum_j alpha_j e_j(t) + sum_k beta_k m_k g_k(t)

and between breakpoints (event and trigger times) every e_j decays at the
rule rate and every g_k at the numeric rate. A :class:`Design` therefore
stores, per sequence, the encoder values at target times and at panel starts;
the pre-activation at any quadrature node is rebuilt from two scalars per
panel. Fitting many rule subsets over one corpus reuses a single design.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core import EventSequence, ModelParams, Rule
from .encoders import DecayKernel, decayed_sums, numeric_signal, rule_signal, satisfaction_time

GL_NODES = 8
_gl_x, _gl_w = np.polynomial.legendre.leggauss(GL_NODES)
GL_S = 0.5 * (_gl_x + 1.0)  # nodes on [0, 1]
GL_W = 0.5 * _gl_w
# Panels wider than this many decay lengths are split; keeps 8-node
# Gauss-Legendre at ~1e-13 relative error on the exponential integrand.
MAX_PANEL_DECAYS = 4.0


def softplus(x, gamma: float = 1.0):
    """``gamma * log(1 + exp(x / gamma))``, stable for large ``|x / gamma|``."""
    x = np.asarray(x, dtype=float)
    out = np.maximum(x, 0.0) + gamma * np.log1p(np.exp(-np.abs(x) / gamma))
    return out if out.ndim else float(out)


def log_softplus(x, gamma: float = 1.0):
    z = np.asarray(x, dtype=float) / gamma
    out = np.where(z < -30.0, z, 0.0)
    hi = z >= -30.0
    zh = z[hi]
    out[hi] = np.log(np.maximum(zh, 0.0) + np.log1p(np.exp(-np.abs(zh))))
    out = out + math.log(gamma)
    return out if out.ndim else float(out)


def _sigma_over_softplus(x, gamma: float):
    """``expit(x/gamma) / softplus(x)``, finite for very negative ``x``."""
    z = np.asarray(x, dtype=float) / gamma
    sp = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = expit(z) / (gamma * sp)
    return np.where(z < -30.0, 1.0 / gamma, ratio)


@dataclass(frozen=True)
class NLLBreakdown:
    log_term: float
    integral_term: float

    @property
    def total(self) -> float:
        return self.log_term + self.integral_term


@dataclass(frozen=True)
class ParamGradient:
    lambda0: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma_raw: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.lambda0], self.alpha, self.beta, [self.gamma_raw]])


def trigger_sets(sequence: EventSequence, rules: Sequence[Rule], delta: float) -> list[np.ndarray]:
    return [satisfaction_time(r.body, sequence, delta) for r in rules]


@dataclass
class Design:
    """Encoder features of one or more sequences at log points and panel starts.

    Row blocks belong to sequences via ``log_seq`` / ``pan_seq``.
    """

    log_rule: np.ndarray   # (n_log, J)
    log_num: np.ndarray    # (n_log, K)
    log_seq: np.ndarray
    pan_rule: np.ndarray   # (P, J)
    pan_num: np.ndarray    # (P, K)
    pan_width: np.ndarray
    pan_seq: np.ndarray
    num_seqs: int
    rule_rate: float
    num_rate: float
    _decay: tuple | None = field(default=None, repr=False)

    @property
    def num_rules(self) -> int:
        return self.log_rule.shape[1]

    def decay_factors(self) -> tuple[np.ndarray, np.ndarray]:
        if self._decay is None:
            s = self.pan_width[:, None] * GL_S[None, :]
            self._decay = (np.exp(-self.rule_rate * s), np.exp(-self.num_rate * s))
        return self._decay

    def select_rules(self, columns: Sequence[int]) -> "Design":
        cols = list(columns)
        return Design(self.log_rule[:, cols], self.log_num, self.log_seq, self.pan_rule[:, cols],
                      self.pan_num, self.pan_width, self.pan_seq, self.num_seqs,
                      self.rule_rate, self.num_rate, self._decay)

    def select_sequences(self, seq_indices: Sequence[int]) -> "Design":
        idx = np.asarray(seq_indices, dtype=np.int64)
        remap = np.full(self.num_seqs, -1, dtype=np.int64)
        remap[idx] = np.arange(len(idx))
        lm = remap[self.log_seq] >= 0
        pm = remap[self.pan_seq] >= 0
        # rows are regrouped in the order of seq_indices
        lo = np.argsort(remap[self.log_seq][lm], kind="stable")
        po = np.argsort(remap[self.pan_seq][pm], kind="stable")
        decay = None
        if self._decay is not None:
            decay = (self._decay[0][pm][po], self._decay[1][pm][po])
        return Design(self.log_rule[lm][lo], self.log_num[lm][lo], remap[self.log_seq][lm][lo],
                      self.pan_rule[pm][po], self.pan_num[pm][po], self.pan_width[pm][po],
                      remap[self.pan_seq][pm][po], len(idx), self.rule_rate, self.num_rate, decay)

    @classmethod
    def concat(cls, designs: Sequence["Design"]) -> "Design":
        offs = np.cumsum([0] + [d.num_seqs for d in designs])
        d0 = designs[0]
        return cls(
            np.vstack([d.log_rule for d in designs]), np.vstack([d.log_num for d in designs]),
            np.concatenate([d.log_seq + o for d, o in zip(designs, offs)]),
            np.vstack([d.pan_rule for d in designs]), np.vstack([d.pan_num for d in designs]),
            np.concatenate([d.pan_width for d in designs]),
            np.concatenate([d.pan_seq + o for d, o in zip(designs, offs)]),
            int(offs[-1]), d0.rule_rate, d0.num_rate)


def panel_breakpoints(sequence: EventSequence, triggers: Sequence[np.ndarray], t_start: float,
                      t_end: float, max_width: float) -> np.ndarray:
    pts = [np.array([t_start, t_end]), sequence.times] + list(triggers)
    bp = np.unique(np.concatenate(pts))
    bp = bp[(bp >= t_start) & (bp <= t_end)]
    if len(bp) < 2:
        return bp
    widths = np.diff(bp)
    pieces = np.maximum(np.ceil(widths / max_width), 1).astype(int)
    if np.all(pieces == 1):
        return bp
    out = [bp[:1]]
    for a, w, n in zip(bp[:-1], widths, pieces):
        out.append(a + w * np.arange(1, n + 1) / n)
    out = np.concatenate(out)
    out[-1] = bp[-1]
    return out


def build_design(sequence: EventSequence, rules: Sequence[Rule], *, delta: float,
                 rule_rate: float, num_rate: float, triggers: Sequence[np.ndarray] | None = None,
                 target_times: np.ndarray | None = None, t_start: float = 0.0,
                 t_end: float | None = None, integrate_to: str = "horizon",
                 extra_breakpoints: Sequence[float] = ()) -> Design:
    """Features for one sequence. Log points are the target times in ``(t_start, t_end]``.

    ``integrate_to='last_event'`` ends the integral at the last target time
    instead of the horizon.
    """
    if triggers is None:
        triggers = trigger_sets(sequence, rules, delta)
    if target_times is None:
        target_times = sequence.target_times()
    target_times = np.asarray(target_times, dtype=float)
    if t_end is None:
        if integrate_to == "horizon":
            t_end = sequence.horizon
        elif integrate_to == "last_event":
            t_end = float(target_times[-1]) if len(target_times) else t_start
        else:
            raise ValueError(f"integrate_to must be 'horizon' or 'last_event', got {integrate_to!r}")
    after_start = target_times > t_start if t_start > 0 else target_times >= t_start
    lo = target_times[after_start & (target_times <= t_end)]
    max_width = MAX_PANEL_DECAYS / max(rule_rate, num_rate)
    bp = panel_breakpoints(sequence, list(triggers) + [np.asarray(extra_breakpoints, dtype=float)],
                           t_start, t_end, max_width)
    starts, widths = bp[:-1], np.diff(bp)
    keep = widths > 0
    starts, widths = starts[keep], widths[keep]
    K = sequence.num_types
    J = len(rules)
    log_rule = np.zeros((len(lo), J))
    pan_rule = np.zeros((len(starts), J))
    for j, trig in enumerate(triggers):
        log_rule[:, j] = decayed_sums(trig, None, rule_rate, lo, inclusive=False)
        pan_rule[:, j] = decayed_sums(trig, None, rule_rate, starts, inclusive=True)
    log_num = np.zeros((len(lo), K))
    pan_num = np.zeros((len(starts), K))
    for k in np.unique(sequence.types):
        sel = sequence.types == k
        t_k, v_k = sequence.times[sel], sequence.values[sel]
        log_num[:, k - 1] = decayed_sums(t_k, v_k, num_rate, lo, inclusive=False)
        pan_num[:, k - 1] = decayed_sums(t_k, v_k, num_rate, starts, inclusive=True)
    return Design(log_rule, log_num, np.zeros(len(lo), dtype=np.int64), pan_rule, pan_num,
                  widths, np.zeros(len(starts), dtype=np.int64), 1, rule_rate, num_rate)


def build_corpus_design(corpus: Sequence[EventSequence], rules: Sequence[Rule], *, delta: float,
                        rule_rate: float, num_rate: float, integrate_to: str = "horizon") -> Design:
    return Design.concat([build_design(s, rules, delta=delta, rule_rate=rule_rate,
                                       num_rate=num_rate, integrate_to=integrate_to) for s in corpus])


def _split(theta: np.ndarray, J: int, K: int):
    return theta[0], theta[1:1 + J], theta[1 + J:1 + J + K], theta[1 + J + K]


def evaluate_design(design: Design, theta: np.ndarray, mask: np.ndarray, *, want_grad: bool = True,
                    seq_weights: np.ndarray | None = None):
    """Weighted NLL over the sequences of a design.

    Returns ``(log_terms, integral_terms, grad)`` where the first two are per
    sequence (unweighted) and ``grad`` is the gradient of
    ``sum_s w_s (log_s + integral_s)`` with respect to ``theta``.
    """
    J, K = design.num_rules, design.log_num.shape[1]
    lam0, alpha, beta, graw = _split(np.asarray(theta, dtype=float), J, K)
    gamma = math.exp(graw)
    bm = beta * mask
    w_seq = np.ones(design.num_seqs) if seq_weights is None else np.asarray(seq_weights, dtype=float)

    x_log = lam0 + design.log_rule @ alpha + design.log_num @ bm
    log_terms = -np.bincount(design.log_seq, weights=log_softplus(x_log, gamma), minlength=design.num_seqs)

    dr, dn = design.decay_factors()
    shared = design.rule_rate == design.num_rate
    r0 = design.pan_rule @ alpha
    n0 = design.pan_num @ bm
    if shared:
        x_pan = (r0 + n0)[:, None] * dr
    else:
        x_pan = r0[:, None] * dr
        x_pan += n0[:, None] * dn
    x_pan += lam0
    z = x_pan / gamma
    e = np.exp(-np.abs(z))
    sp = np.log1p(e)
    sp += np.maximum(z, 0.0)
    sp *= gamma
    width = design.pan_width
    int_terms = np.bincount(design.pan_seq, weights=(sp @ GL_W) * width, minlength=design.num_seqs)
    if not want_grad:
        return log_terms, int_terms, None

    grad = np.zeros(2 + J + K)
    # log term
    wl = w_seq[design.log_seq]
    ratio = _sigma_over_softplus(x_log, gamma)
    gx_log = -wl * ratio
    grad[0] += gx_log.sum()
    grad[1:1 + J] += design.log_rule.T @ gx_log
    grad[1 + J:1 + J + K] += (design.log_num.T @ gx_log) * mask
    # d softplus / d gamma_raw = softplus - x * sigma
    sp_log = softplus(x_log, gamma)
    sig_log = expit(x_log / gamma)
    grad[-1] += -(wl * (sp_log - x_log * sig_log) / sp_log).sum()
    # integral term
    sig = np.where(z >= 0, 1.0, e)
    sig /= 1.0 + e
    row_w = w_seq[design.pan_seq] * width
    grad[0] += row_w @ (sig @ GL_W)
    sr = row_w * ((sig * dr) @ GL_W)
    sn = sr if shared else row_w * ((sig * dn) @ GL_W)
    grad[1:1 + J] += design.pan_rule.T @ sr
    grad[1 + J:1 + J + K] += (design.pan_num.T @ sn) * mask
    sig *= x_pan
    sp -= sig
    grad[-1] += row_w @ (sp @ GL_W)
    return log_terms, int_terms, grad


@dataclass
class IntensityContext:
    """A sequence bundled with its rules, parameters and precomputed triggers."""

    sequence: EventSequence
    rules: Sequence[Rule]
    params: ModelParams
    triggers: list[np.ndarray] = field(default_factory=list)
    integrate_to: str = "horizon"

    def __post_init__(self):
        if len(self.params.alpha) != len(self.rules):
            raise ValueError("one alpha per rule is required")
        if self.params.num_types != self.sequence.num_types:
            raise ValueError("beta must have one entry per event type")
        if not self.triggers:
            self.triggers = trigger_sets(self.sequence, self.rules, self.params.delta)

    @property
    def rule_kernel(self) -> DecayKernel:
        return DecayKernel(self.params.rule_decay_rate)

    @property
    def num_kernel(self) -> DecayKernel:
        return DecayKernel(self.params.num_decay_rate)

    def design(self, target_times=None, t_start: float = 0.0, t_end: float | None = None,
               extra_breakpoints=()) -> Design:
        p = self.params
        return build_design(self.sequence, self.rules, delta=p.delta, rule_rate=p.rule_decay_rate,
                            num_rate=p.num_decay_rate, triggers=self.triggers,
                            target_times=target_times, t_start=t_start, t_end=t_end,
                            integrate_to=self.integrate_to, extra_breakpoints=extra_breakpoints)


def preactivation_at(ctx: IntensityContext, t: float, inclusive: bool = False) -> float:
    """``lambda0 + rule part + numeric part`` from history before ``t`` (or at/before)."""
    p = ctx.params
    probe = t if inclusive else math.nextafter(t, -math.inf)
    rk, nk = ctx.rule_kernel, ctx.num_kernel
    x = p.lambda0
    for a, trig in zip(p.alpha, ctx.triggers):
        if a:
            x += a * rule_signal(trig[trig <= probe], rk, t)
    seq = ctx.sequence if inclusive else ctx.sequence.truncate(probe, horizon=ctx.sequence.horizon)
    for k in range(1, ctx.sequence.num_types + 1):
        b = p.beta[k - 1]
        if b and p.mask[k - 1]:
            x += b * numeric_signal(seq, k, True, nk, t)
    return x


def intensity_at(ctx: IntensityContext, t: float, inclusive: bool = False) -> float:
    """lambda(t | H_t); history excludes anything at exactly ``t`` unless ``inclusive``."""
    return softplus(preactivation_at(ctx, t, inclusive), ctx.params.gamma)


def nll(ctx: IntensityContext, target_times=None, t_start: float = 0.0,
        t_end: float | None = None) -> NLLBreakdown:
    extra = [t_start] if t_start > 0 else []
    d = ctx.design(target_times, t_start, t_end, extra)
    lt, it, _ = evaluate_design(d, ctx.params.to_vector(), np.array(ctx.params.mask, dtype=float),
                                want_grad=False)
    return NLLBreakdown(float(lt[0]), float(it[0]))


def panel_integrals(design: Design, theta: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Integral of the intensity over each panel of ``design``."""
    J, K = design.num_rules, design.log_num.shape[1]
    lam0, alpha, beta, graw = _split(np.asarray(theta, dtype=float), J, K)
    dr, dn = design.decay_factors()
    x = lam0 + (design.pan_rule @ alpha)[:, None] * dr + (design.pan_num @ (beta * mask))[:, None] * dn
    return (softplus(x, math.exp(graw)) @ GL_W) * design.pan_width


def compensator_at(ctx: IntensityContext, times) -> np.ndarray:
    """Cumulative intensity from 0 to each of ``times`` (sorted, within the horizon)."""
    times = np.asarray(times, dtype=float)
    if len(times) == 0:
        return np.zeros(0)
    d = ctx.design(np.zeros(0), 0.0, float(times[-1]), times)
    per = panel_integrals(d, ctx.params.to_vector(), np.array(ctx.params.mask, dtype=float))
    ends = np.cumsum(d.pan_width)
    cum = np.concatenate([[0.0], np.cumsum(per)])
    # each query time is a breakpoint, so it sits at some panel end up to rounding
    tol = 1e-9 * max(1.0, float(times[-1]))
    return cum[np.searchsorted(ends, times + tol, side="right")]


def nll_gradient(ctx: IntensityContext, target_times=None) -> ParamGradient:
    d = ctx.design(target_times)
    _, _, g = evaluate_design(d, ctx.params.to_vector(), np.array(ctx.params.mask, dtype=float))
    J = len(ctx.rules)
    return ParamGradient(float(g[0]), g[1:1 + J].copy(), g[1 + J:-1].copy(), float(g[-1]))


class ForwardIntensity:
    """Intensity after ``t_from`` when no further covariate events arrive.

    ``x(t_from + s) = lambda0 + R exp(-w_r s) + N exp(-w_n s)``.
    """

    def __init__(self, params: ModelParams, rules: Sequence[Rule], history: EventSequence,
                 t_from: float, triggers: Sequence[np.ndarray] | None = None):
        self.params = params
        self.t_from = t_from
        if triggers is None:
            triggers = trigger_sets(history, rules, params.delta)
        q = np.array([t_from])
        self.R = sum(a * decayed_sums(tr, None, params.rule_decay_rate, q)[0]
                     for a, tr in zip(params.alpha, triggers))
        N = 0.0
        for k in range(1, history.num_types + 1):
            if params.mask[k - 1] and params.beta[k - 1]:
                sel = history.types == k
                N += params.beta[k - 1] * decayed_sums(history.times[sel], history.values[sel],
                                                       params.num_decay_rate, q)[0]
        self.N = float(N)
        self.R = float(self.R)

    def preactivation(self, s):
        p = self.params
        s = np.asarray(s, dtype=float)
        return p.lambda0 + self.R * np.exp(-p.rule_decay_rate * s) + self.N * np.exp(-p.num_decay_rate * s)

    def __call__(self, s):
        return softplus(self.preactivation(s), self.params.gamma)

    def bound(self, s: float) -> float:
        """Upper bound of the intensity on ``[s, inf)``."""
        p = self.params
        r = self.R * math.exp(-p.rule_decay_rate * s)
        n = self.N * math.exp(-p.num_decay_rate * s)
        z = (p.lambda0 + max(r, 0.0) + max(n, 0.0)) / p.gamma
        return p.gamma * (max(z, 0.0) + math.log1p(math.exp(-abs(z))))

    def asymptote(self) -> float:
        return softplus(self.params.lambda0, self.params.gamma)

    @property
    def slowest_rate(self) -> float:
        return min(self.params.rule_decay_rate, self.params.num_decay_rate)

    @property
    def fastest_rate(self) -> float:
        return max(self.params.rule_decay_rate, self.params.num_decay_rate)
