import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stiefattn.decoder import DecoderConfig, gaussian_inputs, init_stack, record_for
from stiefattn.rng import RngState

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = DecoderConfig(d_model=16, n_heads_q=4, n_heads_kv=2, d_h=4, d_ff=24, n_layers=2)
MINI = DecoderConfig(d_model=8, n_heads_q=2, n_heads_kv=1, d_h=4, d_ff=12, n_layers=1)


def gaussian(shape, seed=0):
    return RngState(seed).normal(shape)


@pytest.fixture
def tiny_stack():
    return init_stack(TINY, RngState(11))


@pytest.fixture
def tiny_inputs():
    return gaussian_inputs(TINY, 3, 7, RngState(12))


@pytest.fixture
def tiny_records(tiny_stack, tiny_inputs):
    return [record_for(tiny_stack[0], x) for x in tiny_inputs]


def orthonormal(d, r, seed):
    from stiefattn.linalg import random_orthonormal
    return random_orthonormal(d, r, RngState(seed))


def assert_close(a, b, tol):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    scale = max(np.abs(b).max(), 1.0)
    assert np.abs(a - b).max() <= tol * scale, np.abs(a - b).max()


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, after the regular summary."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid and rep.when == "call":
                name = nodeid.split("test_criterion_")[1]
                lines.append((name, "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status in sorted(lines):
            terminalreporter.write_line(f"{status}  criterion {name}")
