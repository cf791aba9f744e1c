import pytest

_RESULTS: dict[str, tuple[str, bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one criterion outcome: ``acceptance(cid, title, ok, detail)``."""

    def record(cid: str, title: str, ok: bool, detail: str = "") -> None:
        _RESULTS[cid] = (title, bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_RESULTS, key=lambda k: (int(k[1:].split(".")[0]), k)):
        title, ok, detail = _RESULTS[cid]
        line = f"{cid:<5} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
