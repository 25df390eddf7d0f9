import numpy as np
import pytest

from saliency_tal import numerics as nx


@pytest.fixture
def f64():
    with nx.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the session summary."""
    def report(number: int, title: str, ok: bool, detail: str, gated: bool = True) -> bool:
        status = "PASS" if ok else "FAIL"
        suffix = "" if gated else " (reported, not gated)"
        line = f"criterion {number:>2} {status}{suffix}: {title} | {detail}"
        request.config.stash.setdefault(_CRITERIA, []).append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
