import numpy as np
import pytest

from icdmeta.embed_core import EmbeddingSet


def random_set(n, d, seed=0, prefix="w", source="s"):
    rng = np.random.default_rng(seed)
    return EmbeddingSet([f"{prefix}{i}" for i in range(n)], rng.normal(size=(n, d)), source)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary: one line per criterion, collected from the test reports
_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        num = int(name.split("_")[2])
        _CRITERIA[num] = (name, report.outcome, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_CRITERIA):
        name, outcome, secs = _CRITERIA[num]
        label = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num}: {label}  {name}  ({secs:.1f} s)")
