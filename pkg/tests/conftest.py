import numpy as np
import pytest

_RESULTS: list[tuple[str, bool, str]] = []


class CriterionRecorder:
    """Records an acceptance verdict, then asserts it."""

    def __init__(self, name: str):
        self.name = name

    def check(self, ok: bool, detail: str = "") -> None:
        _RESULTS.append((self.name, bool(ok), detail))
        assert ok, f"{self.name}: {detail}"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    name = marker.args[0] if marker else request.node.name
    return CriterionRecorder(name)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion label")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
