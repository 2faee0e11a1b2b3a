import pytest

from treebolic.geometry import Tree, make_params, reference_point


@pytest.fixture
def tree2():
    return Tree(2)


@pytest.fixture
def params_a2():
    return make_params(2, 2, 1, 1)


@pytest.fixture
def origin(tree2):
    return reference_point(tree2)


_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """Record ``(number, title, passed, detail)`` for the acceptance summary."""
    def record(number: int, title: str, passed: bool, detail: str = ""):
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d}. {title}: {detail}")
