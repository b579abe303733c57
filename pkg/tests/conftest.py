import copy

import pytest

TWO_CELLS = {
    "name": "two",
    "graph": {"cells": [{"id": 1, "x": 0.0, "y": 0.0}, {"id": 2, "x": 1000.0, "y": 0.0}], "edges": [[1, 2]]},
    "radio": {"shadowing_std_db": 0.0},
    "timescale": {"delta_control_s": 0.1, "delta_meas_s": 0.05},
    "handover": {"hysteresis_db": 3.0, "ttt_instants": 3, "ho_interruption_instants": 0},
    "mobility": {"speed_mps": 0.0, "boxes": [{"x": [100, 100], "y": [0, 0], "ues": 1}]},
    "episode": {"epochs": 4},
    "features": {"throughput_ref_bps": 1e7},
}


@pytest.fixture
def two_cell_doc():
    return copy.deepcopy(TWO_CELLS)


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


def pytest_runtest_logreport(report):
    # record the call phase, or a setup/skip failure that prevents it
    if report.when != "call" and report.passed:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    n = int(props["criterion"])
    if n in _ACCEPTANCE and _ACCEPTANCE[n][0] != "PASS":
        return
    status = "PASS" if report.passed else "FAIL"
    _ACCEPTANCE[n] = (status, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}" + (f" [{detail}]" if detail else ""))
