import pytest

from oracles import brute_force_ssim

ACCEPTANCE_LINES: list = []


@pytest.fixture
def ssim_oracle():
    return brute_force_ssim


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def record(criterion: str, checks: dict, detail: str = "") -> None:
        failed = [name for name, ok in checks.items() if not ok]
        status = "PASS" if not failed else "FAIL"
        line = f"{criterion} {status}: {detail}" + (f" (failed: {', '.join(failed)})" if failed else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert not failed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
