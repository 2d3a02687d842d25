import contextlib
import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
CONFIGS = Path(__file__).resolve().parents[1] / "src" / "rhbsde" / "configs"

_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def oracle_values():
    return json.loads((FIXTURES / "oracle_values.json").read_text())


@pytest.fixture(scope="session")
def configs_dir():
    return CONFIGS


class _Criterion:
    def __init__(self, n, label):
        self.n, self.label, self.detail = n, label, ""


@pytest.fixture(scope="session")
def criterion():
    """Context manager recording one pass/fail line per acceptance criterion."""

    @contextlib.contextmanager
    def run(n, label):
        c = _Criterion(n, label)
        ok = False
        try:
            yield c
            ok = True
        finally:
            line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {label}  {c.detail}"
            _ACCEPTANCE[n] = line
            print(line)

    return run


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
