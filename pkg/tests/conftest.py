import os

import pytest

from pipeforge.synthetic import write_biased_csv


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("PIPEFORGE_SEED", raising=False)


@pytest.fixture(scope="session")
def biased_csv(tmp_path_factory):
    """300-row dataset with a 0.3 selection-rate gap between groups "1" and "2"."""
    return write_biased_csv(tmp_path_factory.mktemp("data") / "biased.csv", n=300, gap=0.3, seed=1)


@pytest.fixture(scope="session")
def cpu_count():
    return os.cpu_count() or 1


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, ok, detail=""):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
