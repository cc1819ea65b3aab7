import math
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from hrtpp.core import EventSequence, Pred, Relation, RelationKind, Rule
from hrtpp.dsl import default_names, name_table

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def seq(events, horizon=None, num_types=4, target=None):
    """Build a sequence from ``(t, k)`` or ``(t, k, v)`` tuples."""
    events = sorted(events, key=lambda e: e[0])
    times = [e[0] for e in events]
    types = [e[1] for e in events]
    values = [e[2] if len(e) > 2 else 1.0 for e in events]
    if horizon is None:
        horizon = max(times, default=0.0) + 1.0
    return EventSequence(np.array(times, float), np.array(types, int), np.array(values, float),
                         horizon=horizon, num_types=num_types, target_type=target or num_types)


def softplus_inv(y):
    return math.log(math.expm1(y))


def bodies(max_leaves, types):
    """Strategy for rule bodies with 1..max_leaves leaves drawn from ``types``."""
    leaf = st.sampled_from(types).map(Pred)

    def extend(children):
        return st.builds(Relation, st.sampled_from(list(RelationKind)), children, children)

    return st.recursive(leaf, extend, max_leaves=max_leaves).filter(lambda b: _count(b) <= max_leaves)


def _count(b):
    return 1 if isinstance(b, Pred) else _count(b.left) + _count(b.right)


def rules(max_leaves=3, num_types=6):
    return bodies(max_leaves, list(range(1, num_types))).map(lambda b: Rule(b, num_types))


@pytest.fixture
def names6():
    return default_names(6)


@pytest.fixture
def table6(names6):
    return name_table(names6)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
