"""Shared fixtures and the acceptance verdict summary.

``acceptance.record(...)`` collects one verdict per acceptance test; after
the whole session the hook below prints one PASS/FAIL line per criterion and
writes the same lines to ``acceptance_report.txt`` next to this file.
"""

from __future__ import annotations

import pathlib

import numpy as np
import pytest

import acceptance_registry as acceptance


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not acceptance.RECORDS:
        return
    lines = acceptance.verdict_lines()
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
    out = pathlib.Path(__file__).parent.parent / "acceptance_report.txt"
    out.write_text("\n".join(lines) + "\n")
    terminalreporter.write_line(f"(written to {out})")
