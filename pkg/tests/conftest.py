import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from dscache.model import ModelSpec, build_model  # noqa: E402


@pytest.fixture(scope="session")
def model():
    """Reference configuration: 4 layers, 4 heads, head_dim 16, f64."""
    return build_model(ModelSpec())


@pytest.fixture(scope="session")
def small_model():
    return build_model(ModelSpec(num_layers=2, num_heads=2, head_dim=8, ffn_dim=32, vocab_size=64, seed=3))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    ran = [int(r.nodeid.split("criterion_")[1][:2])
           for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, [])
           if "test_acceptance.py::test_criterion_" in r.nodeid]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(set(ran)):
        line = mod.RESULTS.get(n, f"criterion {n:>2} FAIL  {mod.TITLES[n]}: did not complete")
        terminalreporter.write_line(line)
