import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    from fogguard.corpus import make_corpus

    return make_corpus(tmp_path_factory.mktemp("corpus"), seed=0)


_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, printed at the end of the run."""

    def record(name: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[name] = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE.values():
            terminalreporter.write_line(line)
