from __future__ import annotations

from functools import lru_cache

import pytest

from eprbound.fpe import solve_system
from eprbound.funct import compute_functionals, decompose
from eprbound.model import Grid, build_system

ACCEPTANCE_LINES: list[str] = []


@lru_cache(maxsize=None)
def solved(name: str, n: int = 256, **params):
    """(system, state, decomposition, functionals) for a catalog system, cached per session."""
    spec = {"variant": "catalog", "name": name}
    if params:
        spec["params"] = params
    sys = build_system(spec)
    state = solve_system(sys, Grid.uniform(sys.domain, n))
    dec = decompose(sys, state)
    return sys, state, dec, compute_functionals(dec, sys.D)


@pytest.fixture(scope="session")
def solved_catalog():
    return solved


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
