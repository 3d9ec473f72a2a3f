import pytest

_LINES: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Record one acceptance verdict; the lines are echoed at the end of the run."""
    def log(label: str, passed: bool, detail: str) -> bool:
        _LINES.append((label, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
        return passed
    return log


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for label, passed, detail in _LINES:
        tr.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
    by_criterion: dict[str, list[bool]] = {}
    for label, passed, _ in _LINES:
        by_criterion.setdefault(label.split(".")[0], []).append(passed)
    tr.write_line("")
    for key in sorted(by_criterion, key=lambda k: int(k.split()[-1])):
        verdicts = by_criterion[key]
        tr.write_line(f"{'PASS' if all(verdicts) else 'FAIL'}  {key} "
                      f"({sum(verdicts)}/{len(verdicts)} checks pass)")
