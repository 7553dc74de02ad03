import numpy as np
import pytest

from esv.models import CallableScorer, KINDS, load_model, random_model_spec
from esv.sequence import FeatureSequence


def table_scorer(values: dict, n_classes=1):
    """Set function over element ids; element ``k`` has feature vector ``[k]``."""
    prior = values[frozenset()]

    def fn(rows):
        return values[frozenset(int(round(r[0])) for r in rows)]

    return CallableScorer(fn, n_classes, 1, np.atleast_1d(prior))


def id_sequence(n):
    return FeatureSequence(np.arange(n, dtype=float)[:, None])


@pytest.fixture
def two_player():
    """f(empty)=0, f(a)=0.3, f(b)=0.5, f(ab)=1.0 with a=0, b=1."""
    values = {
        frozenset(): [0.0],
        frozenset({0}): [0.3],
        frozenset({1}): [0.5],
        frozenset({0, 1}): [1.0],
    }
    return table_scorer(values), id_sequence(2)


def random_instance(kind, seed, n, n_classes=3, dim=3, n_max=4, hidden=8):
    rng = np.random.default_rng(seed)
    spec = random_model_spec(kind, n_classes, dim, hidden=hidden, n_max=n_max, seed=seed,
                             empty_prior=rng.normal(size=n_classes))
    return load_model(spec), FeatureSequence(rng.normal(size=(n, dim)))


@pytest.fixture(params=KINDS)
def kind(request):
    return request.param


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
