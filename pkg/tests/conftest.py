"""Shared fixtures: shipped experiment inputs, tiny hand-built cases, and the
acceptance-criteria report printed at the end of the session."""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from plfgrid import control, netcase
from plfgrid.dlpf import branch_flow_matrix, build_dlpf
from plfgrid.netcase import build_admittance

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"


@lru_cache(maxsize=None)
def experiment(name: str):
    """(case, params, wind history) for one shipped experiment setup."""
    names, hist = netcase.read_wind_csv(DATA / "wind" / f"{name}_wind.csv")
    case = netcase.load_case(DATA / "cases" / f"{name}.m",
                             DATA / "sidecars" / f"{name}.json",
                             wind_names=names)
    sidecar = netcase.load_sidecar(DATA / "sidecars" / f"{name}.json")
    params = control.params_from_config(case, sidecar.get("control", {}))
    return case, params, hist


@lru_cache(maxsize=None)
def linear_parts(name: str):
    """(admittance, dlpf model, piecewise model, flow map) for one setup."""
    case, params, _ = experiment(name)
    adm = build_admittance(case)
    lin = build_dlpf(case, adm)
    model = control.assemble_piecewise(case, lin, params)
    flow_map = branch_flow_matrix(case, adm, lin)
    return adm, lin, model, flow_map


TWO_BUS = """\
function mpc = two_bus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1.0\t0\t230\t1\t1.1\t0.9;
\t2\t1\t50\t20\t0\t0\t1\t1.0\t0\t230\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t0\t0\t300\t-300\t1.0\t100\t1\t250\t0;
];
mpc.branch = [
\t1\t2\t0\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;
];
"""

# Slack at 3 degrees, two PV buses, both lines lossless: the flow map is a
# pure angle-difference map with hand-checkable entries.
THREE_BUS_PV = """\
function mpc = three_bus_pv
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1.0\t3\t230\t1\t1.1\t0.9;
\t2\t2\t20\t0\t0\t0\t1\t1.0\t0\t230\t1\t1.1\t0.9;
\t3\t2\t30\t0\t0\t0\t1\t1.0\t0\t230\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t0\t0\t300\t-300\t1.0\t100\t1\t250\t0;
\t2\t40\t0\t300\t-300\t1.0\t100\t1\t150\t0;
\t3\t10\t0\t300\t-300\t1.0\t100\t1\t100\t0;
];
mpc.branch = [
\t1\t2\t0\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;
\t2\t3\t0\t0.2\t0\t0\t0\t0\t0\t0\t1\t-360\t360;
];
"""

# Slack + PV + PQ with a nonzero dispatch surplus, for checking the constant
# parts of the piecewise maps against their closed forms.
THREE_BUS_PQ = """\
function mpc = three_bus_pq
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1.02\t0\t230\t1\t1.1\t0.9;
\t2\t2\t50\t0\t0\t0\t1\t1.0\t0\t230\t1\t1.1\t0.9;
\t3\t1\t50\t10\t0\t0\t1\t1.0\t0\t230\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t0\t0\t300\t-300\t1.02\t100\t1\t250\t0;
\t2\t120\t0\t300\t-300\t1.01\t100\t1\t150\t0;
];
mpc.branch = [
\t1\t2\t0.01\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;
\t2\t3\t0.01\t0.2\t0\t0\t0\t0\t0\t0\t1\t-360\t360;
\t1\t3\t0.02\t0.25\t0\t0\t0\t0\t0\t0\t1\t-360\t360;
];
"""


@pytest.fixture
def two_bus():
    return netcase.parse_case(TWO_BUS, name="two_bus")


@pytest.fixture
def three_bus_pv():
    return netcase.parse_case(THREE_BUS_PV, name="three_bus_pv")


@pytest.fixture
def three_bus_pq():
    return netcase.parse_case(THREE_BUS_PQ, name="three_bus_pq")


# ---------------------------------------------------------------------------
# acceptance-criteria report

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance():
    """Recorder for one PASS/FAIL line per acceptance criterion."""

    def record(num: int, title: str, passed: bool, detail: str = ""):
        ACCEPTANCE_LINES.append((num, title, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE_LINES):
        status = "PASS" if ok else "FAIL"
        line = f"{status}  criterion {num}: {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
