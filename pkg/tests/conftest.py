from __future__ import annotations

import socket

import pytest

from lpfarm.lpf.clock import SimClock
from lpfarm.lpf.core import LpfContext
from lpfarm.lpf.runtime import Driver


def free_port(host="127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


@pytest.fixture
def clock():
    return SimClock()


@pytest.fixture
def driver():
    d = Driver()
    yield d
    d.shutdown()


@pytest.fixture
def make_lpf(driver):
    """Factory for networked LPFs on 127.0.0.1, driven by the shared driver."""

    def make(name="lpf", **kw):
        host = kw.pop("host", "127.0.0.1")
        port = kw.pop("port", 0)
        return driver.add(LpfContext(name, host, port, **kw))

    return make


@pytest.fixture
def tmp_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path



# -- acceptance criteria report -----------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion check")
    config._criteria = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "setup":
        item._setup_s = rep.duration  # a shared scenario fixture counts toward its first test
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    number, title = mark.args
    spent = rep.duration + getattr(item, "_setup_s", 0.0)
    line = f"criterion {number:>2}: {'PASS' if rep.passed else 'FAIL'}  {title}  ({spent:.1f} s)"
    item.config._criteria.append(line)
    tr = item.config.pluginmanager.getplugin("terminalreporter")
    if tr is not None:
        tr.write_line("")
        tr.write_line(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config._criteria:
        terminalreporter.section("acceptance criteria")
        for line in config._criteria:
            terminalreporter.write_line(line)
