import pytest

from hetsoc.hwmodel import HardwareConfig
from hetsoc.modelspec import load_model_spec, partitionable_shapes
from hetsoc.profiler import build_profile


@pytest.fixture(scope="session")
def hw():
    return HardwareConfig()


@pytest.fixture(scope="session")
def llama8b():
    return load_model_spec("llama8b")


@pytest.fixture(scope="session")
def table8b(hw, llama8b):
    return build_profile(hw, partitionable_shapes(llama8b))


_CRITERIA: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    ok = _CRITERIA.get(number, (title, True))[1] and rep.passed
    _CRITERIA[number] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}: {title}")
