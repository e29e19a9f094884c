from __future__ import annotations

import pytest

# Pass/fail lines registered by the acceptance suite; echoed in the terminal
# summary so a plain `pytest` run shows one line per criterion.
ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool) -> None:
    status = "PASS" if passed else "FAIL"
    line = f"ACCEPTANCE {name}: {status}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def sim_clock():
    from edgeqkd.clock import SimulatedClock

    return SimulatedClock()
