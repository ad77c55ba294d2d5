"""Session fixtures for the acceptance gate.

The desk-scale suites (5 domains, 3 seeds) take a few minutes to train, so
they are built once per session and shared by every criterion that needs
them. The builtin desk5 config is the single source of truth for the recipe;
the CLI and the acceptance tests exercise the same settings.
"""

import time
from types import SimpleNamespace

import pytest

from moeup.cli import load_experiment
from moeup.eval_harness import run_ladder, train_suite


@pytest.fixture(scope="session")
def desk():
    """Trained seed + expert suites for the 5-domain run, one per seed."""
    exp = load_experiment("builtin:desk5")
    spec = exp.ladder_spec()
    corpora = exp.build_corpora()
    seed_corpora = exp.build_seed_corpora()
    t0 = time.perf_counter()
    suites = [
        train_suite(spec, corpora, seed=s, seed_corpora=seed_corpora) for s in exp.seeds
    ]
    train_seconds = time.perf_counter() - t0
    return SimpleNamespace(
        exp=exp,
        spec=spec,
        corpora=corpora,
        suites=suites,
        seeds=list(exp.seeds),
        train_seconds=train_seconds,
    )


@pytest.fixture(scope="session")
def desk_report(desk):
    """Full method ladder over the shared suites."""
    t0 = time.perf_counter()
    report = run_ladder(
        desk.spec, desk.corpora, desk.seeds, suites=desk.suites
    )
    ladder_seconds = time.perf_counter() - t0
    return SimpleNamespace(report=report, ladder_seconds=ladder_seconds)
