import numpy as np
import pytest

from cmdret.tensorio import SynthSpec, generate_synth

_ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """Collect one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def _record(criterion: str, ok: bool, detail: str = "") -> None:
        _ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {criterion}  {detail}".rstrip())
    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_manifest():
    return generate_synth(SynthSpec(seed=3))


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        up = f()
        flat[j] = orig - eps
        down = f()
        flat[j] = orig
        gf[j] = (up - down) / (2 * eps)
    return g
