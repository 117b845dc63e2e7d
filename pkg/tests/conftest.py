import numpy as np
import pytest


def two_gaussians(n, rng):
    """Two-component mixture inside [-1, 1]^2 (60/40 weights)."""
    pick = rng.random(n) < 0.6
    a = rng.normal([-0.45, -0.35], 0.12, (n, 2))
    b = rng.normal([0.4, 0.45], 0.18, (n, 2))
    return np.clip(np.where(pick[:, None], a, b), -1.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def write_csv(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion(request):
    def report(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES[(number, request.node.name)] = line
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
