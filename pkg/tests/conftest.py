import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


# -- acceptance reporting ------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line each in the terminal summary.

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        detail = props.get("detail", "")
        _criteria.append((props["criterion"], props["title"], report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, outcome, detail in sorted(_criteria, key=lambda c: c[0]):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {num:2d}: {title}" + (f" -- {detail}" if detail else ""))


@pytest.fixture(autouse=True)
def _criterion_props(request, record_property):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        record_property("criterion", m.args[0])
        record_property("title", m.args[1])
