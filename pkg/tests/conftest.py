"""Shared fixtures.  The two full training runs are expensive (a few
minutes each) and feed many tests, so they are built once per session."""

import time
from types import SimpleNamespace

import pytest

from syncforge.data import generate_corpus, split_corpus
from syncforge.training import desk_config, train


def _full_run(silent_fraction):
    corpus = generate_corpus(24, 72, silent_fraction=silent_fraction, seed=0)
    config = desk_config()
    t0 = time.perf_counter()
    result, diagnostics = train(corpus, config)
    wall = time.perf_counter() - t0
    fit, heldout = split_corpus(corpus, config.heldout_videos)
    return SimpleNamespace(corpus=corpus, config=config, result=result,
                           diagnostics=diagnostics, fit=fit, heldout=heldout,
                           wall_seconds=wall)


@pytest.fixture(scope="session")
def desk_run():
    """Default-preset training run on the clean synthetic corpus."""
    return _full_run(0.0)


@pytest.fixture(scope="session")
def silence_run():
    """Same preset on a corpus where 30% of the frames are silent."""
    return _full_run(0.3)
