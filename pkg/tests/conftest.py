import warnings

import numpy as np
import pytest
from hypothesis import strategies as st

from fastds.aggregators import ConvergenceWarning
from fastds.dataset import from_records


def make(votes, options=None):
    """Dataset from ``(question, annotator, option)`` triples with int ids."""
    option_ids = None if options is None else tuple(range(options))
    return from_records([(f"q{q}", f"a{a}", o) for q, a, o in votes], option_ids=option_ids)


@pytest.fixture(autouse=True)
def _quiet_convergence():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        yield


@st.composite
def datasets(draw, max_q=6, max_a=3, max_c=3, min_c=2):
    """Small random single-choice datasets, every question with >= 1 vote."""
    C = draw(st.integers(min_c, max_c))
    A = draw(st.integers(1, max_a))
    Q = draw(st.integers(1, max_q))
    votes = []
    for q in range(Q):
        who = draw(st.lists(st.integers(0, A - 1), min_size=1, max_size=A, unique=True))
        for a in who:
            votes.append((q, a, draw(st.integers(0, C - 1))))
    return make(votes, options=C)


def random_params(rng, A, C, zeros=False):
    from fastds.estimation import Parameters

    p = rng.dirichlet(np.ones(C))
    pi = rng.dirichlet(np.ones(C), size=(A, C))
    if zeros:
        pi = np.where(rng.random(pi.shape) < 0.2, 0.0, pi)
        pi[..., 0] += 1e-3
        pi /= pi.sum(-1, keepdims=True)
    return Parameters(p, pi)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
