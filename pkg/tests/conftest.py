import numpy as np
import pytest

from gradflow.energy import MLPEnergy, MLPParams

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def record(criterion, passed, detail=""):
    ACCEPTANCE[criterion] = (bool(passed), detail)


def small_mlp(seed, hidden=8, layers=3, d=2, scale=1.0, bias_scale=0.3):
    """Random small network with nonzero biases (the default init zeroes them)."""
    rng = np.random.default_rng(seed)
    p = MLPParams.initialize(d, hidden, layers, seed)
    p.theta[:] = scale * rng.uniform(-1, 1, p.size) * np.sqrt(3.0 / hidden)
    for b in p.biases:
        b[:] = bias_scale * rng.standard_normal(b.shape)
    return MLPEnergy(p)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
