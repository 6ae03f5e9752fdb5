import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    lines = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            if rep.when != "call":
                continue
            for key, info in rep.user_properties:
                if key == "criterion":
                    verdict = "PASS" if rep.passed else "FAIL"
                    lines.append((info["n"], f"criterion {info['n']}: {verdict}  {info['title']}  ({rep.duration:.1f} s)  {info.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
