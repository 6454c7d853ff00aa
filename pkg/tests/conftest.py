import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS_KEY = "acceptance_verdicts"


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.__dict__.setdefault(_VERDICTS_KEY, [])

    def record(number, title, ok, detail):
        line = f"ACCEPTANCE {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get(_VERDICTS_KEY)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
