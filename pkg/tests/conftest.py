from __future__ import annotations

import numpy as np
import pytest

from stsconv.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Six synthetic pairs: four train, one valid, one test."""
    from stsconv.data import write_synthetic_corpus

    root = tmp_path_factory.mktemp("tiny_corpus")
    return write_synthetic_corpus(root, 6, seed=3, splits=(4 / 6, 1 / 6, 1 / 6))


def small_config(**kw) -> RunConfig:
    """A deliberately small network for fast pipeline tests."""
    base = dict(hidden=16, denoiser_hidden=16, denoiser_layers=2, timbre_dim=256, steps=3, batch_size=2,
                checkpoint_every=0, aligner_heads=2, griffin_lim_iters=4)
    base.update(kw)
    return RunConfig(**base)


# One line per acceptance criterion, filled by tests/test_acceptance.py.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
