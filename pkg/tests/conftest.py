import sys

import numpy as np
import pytest

from yoss.synthdata import CorpusConfig, generate_corpus


def tiny_config(**overrides) -> CorpusConfig:
    base = dict(n_train=12, n_val=6, holdout_combos=(("red", "triangle"),), seed=3)
    base.update(overrides)
    return CorpusConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A 12/6-sample manifest shared by the fast tests."""
    return generate_corpus(tiny_config(), tmp_path_factory.mktemp("corpus") / "tiny")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
