import dataclasses
import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from conftest import seq, softplus_inv
from hrtpp.core import ModelParams, Pred, Relation, RelationKind, Rule, RuleSet
from hrtpp.io import dumps_json
from hrtpp.likelihood import ForwardIntensity, intensity_at
from hrtpp.mining import split_indices
from hrtpp.simulation import ScenarioSpec, simulate_corpus
from hrtpp.training import (DivergentPredictionError, EncodingConfig, FitConfig, FitError, FittedModel,
                            NumericalFailure, corpus_design, corpus_nll, expected_wait, fit, initial_params,
                            mean_nll, next_event_density, optimize_design, predict_next_time,
                            sample_next_time)


def poisson_corpus(rate=2.0, n=500, horizon=10.0, seed=0, K=2):
    spec = ScenarioSpec(num_types=K, target_type=K, rates={k: 0.5 for k in range(1, K)}, rules=RuleSet([]),
                        alpha=(), lambda0=softplus_inv(rate), horizon=horizon, num_sequences=n, seed=seed)
    return simulate_corpus(spec)[0]


def planted_spec(alpha=2.0, n=1000, seed=1):
    rs = RuleSet([Rule(Relation(RelationKind.BEFORE, Pred(1), Pred(2)), 3)])
    return ScenarioSpec(num_types=3, target_type=3, rates={1: 0.4, 2: 0.4}, rules=rs, alpha=(alpha,),
                        lambda0=-1.0, horizon=20.0, num_sequences=n, seed=seed)


def with_params(model, params):
    return dataclasses.replace(model, params=params)


def const_model(c, K=2, gamma_raw=0.0):
    corpus = [seq([(0.5, K)], horizon=1.0, num_types=K)]
    m = fit(corpus, [], FitConfig(max_epochs=0))
    g = math.exp(gamma_raw)
    return with_params(m, m.params.replace(lambda0=g * softplus_inv(c / g), gamma_raw=gamma_raw))


class TestFit:
    def test_poisson_rate_matches_mle(self):
        corpus = poisson_corpus()
        mle = sum(len(s.target_times()) for s in corpus) / sum(s.horizon for s in corpus)
        m = fit(corpus, [], FitConfig(l2_weight=0.0))
        fitted = m.params.gamma * math.log1p(math.exp(m.params.lambda0 / m.params.gamma))
        assert fitted == pytest.approx(mle, rel=1e-3)
        assert fitted == pytest.approx(2.0, rel=0.05)

    def test_planted_rule_recovered_and_helps_heldout(self):
        corpus, _ = simulate_corpus(planted_spec())
        tr, te = split_indices(len(corpus), 0)
        train, test = [corpus[i] for i in tr], [corpus[i] for i in te]
        with_rule = fit(train, planted_spec().rules)
        without = fit(train, [])
        assert with_rule.params.alpha[0] > 1.0
        assert corpus_nll(with_rule, test) < corpus_nll(without, test)

    def test_zero_epochs_returns_initial(self):
        corpus = poisson_corpus(n=20)
        enc = EncodingConfig()
        m = fit(corpus, [], FitConfig(max_epochs=0), enc)
        p0 = initial_params(corpus, [], enc, enc.resolve_delta(corpus))
        assert m.params == p0
        assert m.epochs_run == 0
        assert m.train_nll == corpus_nll(m, corpus)

    def test_initial_rate_is_empirical(self):
        corpus = poisson_corpus(n=50)
        enc = EncodingConfig()
        p0 = initial_params(corpus, [], enc, 0.1)
        rate = sum(len(s.target_times()) for s in corpus) / sum(s.horizon for s in corpus)
        assert math.log1p(math.exp(p0.lambda0)) == pytest.approx(rate, rel=1e-12)

    def test_deterministic(self):
        corpus, _ = simulate_corpus(planted_spec(n=200))
        a = fit(corpus, planted_spec().rules, FitConfig(max_epochs=50))
        b = fit(corpus, planted_spec().rules, FitConfig(max_epochs=50))
        assert dumps_json(a.to_dict()) == dumps_json(b.to_dict())

    def test_objective_never_increases(self):
        corpus, _ = simulate_corpus(planted_spec(n=200))
        m = fit(corpus, planted_spec().rules, FitConfig(max_epochs=80, learning_rate=0.5))
        h = np.array(m.history)
        assert np.all(np.diff(h) <= 0)
        assert h[-1] <= h[0]

    def test_errors(self):
        with pytest.raises(FitError):
            fit([], [])
        a = seq([(0.5, 2)], num_types=2)
        b = seq([(0.5, 3)], num_types=3)
        with pytest.raises(FitError):
            fit([a, b], [])
        with pytest.raises(FitError):
            fit([a], [Rule(Pred(2), 1)])

    def test_nan_reports_parameter_and_epoch(self):
        corpus = poisson_corpus(n=5)
        rules = [Rule(Pred(1), 2)]
        d = corpus_design(corpus, rules, 0.1, EncodingConfig())
        theta = np.array([0.0, np.nan, 0.0, 0.0, 0.0])
        with pytest.raises(NumericalFailure, match="epoch"):
            optimize_design(d, theta, (True, False), FitConfig())

    def test_model_json_roundtrip_is_byte_identical(self):
        corpus, _ = simulate_corpus(planted_spec(n=100))
        m = fit(corpus, planted_spec().rules, FitConfig(max_epochs=30))
        text = dumps_json(m.to_dict())
        again = FittedModel.from_dict(json.loads(text), corpus=corpus)
        assert dumps_json(again.to_dict()) == text

    def test_load_rejects_tampered_nll(self):
        corpus, _ = simulate_corpus(planted_spec(n=50))
        d = fit(corpus, [], FitConfig(max_epochs=5)).to_dict()
        d["train_nll"] += 1e-3
        with pytest.raises(ValueError, match="train_nll"):
            FittedModel.from_dict(d, corpus=corpus)


class TestPrediction:
    def test_constant_two(self):
        m = const_model(2.0)
        h = seq([], horizon=0.0, num_types=2)
        assert predict_next_time(m, h, 0.0) == pytest.approx(0.5, abs=1e-8)

    @pytest.mark.parametrize("c,t_from,gamma_raw", [(0.3, 4.0, 0.0), (7.0, 1.5, -1.0), (1.0, 0.2, 1.2)])
    def test_constant_mean(self, c, t_from, gamma_raw):
        m = const_model(c, gamma_raw=gamma_raw)
        h = seq([(0.2, 1)], horizon=t_from, num_types=2)
        assert predict_next_time(m, h, t_from) - t_from == pytest.approx(1 / c, abs=1e-8)

    def test_constant_density(self):
        m = const_model(1.5)
        h = seq([], horizon=0.0, num_types=2)
        for tq in (0.0, 0.4, 3.0):
            assert next_event_density(m, h, 0.0, tq) == pytest.approx(1.5 * math.exp(-1.5 * tq), rel=1e-10)

    def planted_model(self):
        spec = planted_spec()
        corpus = [seq([(0.5, 3)], num_types=3)]
        m = fit(corpus, spec.rules, FitConfig(max_epochs=0))
        return with_params(m, spec.true_params.replace(beta=(0.6, -0.3, 0.0), mask=(True, True, False)))

    def history(self):
        return seq([(0.5, 1, 1.0), (1.0, 1, 2.0), (1.6, 2, 0.5), (2.0, 3, 0.0)], horizon=2.0, num_types=3)

    def test_density_at_t_from_equals_intensity(self):
        m, h = self.planted_model(), self.history()
        lam = intensity_at(m.context(h), 2.0, inclusive=True)
        assert next_event_density(m, h, 2.0, 2.0) == pytest.approx(lam, rel=1e-12)

    def test_density_integrates_to_one(self):
        m, h = self.planted_model(), self.history()
        fwd = ForwardIntensity(m.params, list(m.rules), h, 2.0)
        upper = 2.0 + 50 / fwd.asymptote()
        mass, _ = integrate.quad(lambda t: next_event_density(m, h, 2.0, t), 2.0, upper, limit=400)
        assert 0.99 <= mass <= 1.0 + 1e-9

    def test_survival_non_increasing(self):
        m, h = self.planted_model(), self.history()
        s = [math.exp(-0.0)]
        for tq in np.linspace(2.0, 10.0, 40)[1:]:
            d = next_event_density(m, h, 2.0, tq)
            fwd = ForwardIntensity(m.params, list(m.rules), h, 2.0)
            s.append(d / float(fwd(tq - 2.0)))
        assert s[0] == 1.0
        assert np.all(np.diff(s) <= 1e-15)

    def test_expectation_matches_monte_carlo(self):
        m, h = self.planted_model(), self.history()
        rng = np.random.default_rng(11)
        draws = np.array([sample_next_time(m, h, 2.0, rng) for _ in range(1000)])
        want = predict_next_time(m, h, 2.0)
        se = draws.std(ddof=1) / math.sqrt(len(draws))
        assert abs(draws.mean() - want) <= 3 * se

    def test_samples_are_exponential_for_constant(self):
        m = const_model(2.0)
        h = seq([], horizon=0.0, num_types=2)
        rng = np.random.default_rng(5)
        draws = [sample_next_time(m, h, 0.0, rng) for _ in range(2000)]
        assert stats.kstest(draws, "expon", args=(0, 0.5)).pvalue > 0.01

    def test_vanishing_intensity_is_divergent(self):
        # a fresh trigger makes the current rate ~5 while the asymptote is ~e^-40
        corpus = [seq([(0.5, 2)], horizon=1.0, num_types=2)]
        m = fit(corpus, [Rule(Pred(1), 2)], FitConfig(max_epochs=0))
        m = with_params(m, m.params.replace(lambda0=-40.0, alpha=(45.0,)))
        h = seq([(1.0, 1)], horizon=1.0, num_types=2)
        with pytest.raises(DivergentPredictionError):
            predict_next_time(m, h, 1.0)
        with pytest.raises(DivergentPredictionError):
            _draw_until_tail(m, h)

    def test_slow_constant_rate_is_not_divergent(self):
        m = const_model(1.0)
        m = with_params(m, m.params.replace(lambda0=-40.0))
        want = 1 / math.log1p(math.exp(-40.0))
        assert predict_next_time(m, seq([], horizon=0.0, num_types=2), 0.0) == pytest.approx(want, rel=1e-10)

    def test_t_from_before_history_rejected(self):
        m = const_model(1.0)
        with pytest.raises(ValueError):
            predict_next_time(m, seq([(3.0, 1)], horizon=3.0, num_types=2), 2.0)


def _draw_until_tail(m, h):
    # the first draw whose exponential mark exceeds the transient mass hits the tail
    rng = np.random.default_rng(0)
    for _ in range(50):
        sample_next_time(m, h, 1.0, rng)
