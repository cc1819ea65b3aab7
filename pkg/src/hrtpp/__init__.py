"""Temporal point processes whose intensity combines a baseline, logic rules over
covariate events, and decayed numeric covariate values."""

from .core import (Event, EventSequence, InvalidRuleError, InvalidSequenceError, ModelParams, Pred, Relation,
                   RelationKind, Rule, RuleSet, canonicalize_rule)
from .dsl import RuleSyntaxError, default_names, name_table, parse_rule, print_rule
from .encoders import DecayKernel, satisfaction_time
from .evaluation import AblationGrid, EvalReport, evaluate, rule_accuracy, run_ablation
from .likelihood import IntensityContext, compensator_at, intensity_at, nll, nll_gradient
from .mining import CandidatePool, MiningConfig, filter_predicates, generate_candidates, mine, optimize_ruleset
from .simulation import ScenarioSpec, simulate_corpus, simulate_sequence
from .training import EncodingConfig, FitConfig, FittedModel, fit, predict_next_time, sample_next_time

__version__ = "0.1.0"
