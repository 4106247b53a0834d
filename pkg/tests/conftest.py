import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

TINY_CONFIG = {
    "seed": 0,
    "corpus": {"synthetic": 80},
    "encoder": {"embed_dim": 16, "hidden_dim": 16, "epochs": 3, "batch_size": 16},
    "qse": {"embed_dim": 8, "hidden_dim": 16, "epochs": 2, "batch_size": 16, "max_decode_len": 12},
    "reward": {"epochs_critic": 1, "epochs_joint": 1, "pool_size": 10, "critic_hidden": 8},
}


@pytest.fixture
def tiny_config(tmp_path):
    """Path to a run config small enough to push every stage through in seconds."""
    path = tmp_path / "tiny.json"
    data = json.loads(json.dumps(TINY_CONFIG))
    data["paths"] = {"workdir": str(tmp_path / "work")}
    path.write_text(json.dumps(data))
    return path


# --------------------------------------------------------------------------
# acceptance-criterion reporting: one PASS/FAIL line per criterion

_CRITERIA: dict[int, str] = {}
_STARTED: set[int] = set()


@pytest.fixture
def criterion():
    """``record(number, title, passed, detail)``: log one acceptance line, then assert."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}  {title}: {detail}"
        _CRITERIA[number] = line
        print(line)
        assert passed, line

    def start(number: int) -> None:
        _STARTED.add(number)

    record.start = start
    return record


def pytest_terminal_summary(terminalreporter):
    if not _STARTED and not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_STARTED | set(_CRITERIA)):
        terminalreporter.write_line(_CRITERIA.get(number, f"FAIL  criterion {number:>2}  errored before a verdict"))
