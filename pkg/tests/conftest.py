import json

import numpy as np
import pytest

from dcroa.netmodel import load_fixture, parse_network


def line_network(cpl=-100.0, shunt=None, r_line=0.2, l_line=1e-3, r_s=0.5):
    """Source bus -- line -- CPL bus, raw SI units."""
    load = {"id": "L", "capacitance": 1e-3, "has_cpl": True, "cpl_power": cpl}
    if shunt is not None:
        load["shunt_resistance"] = shunt
    return {
        "buses": [
            {"id": "S", "capacitance": 2e-3, "has_source": True, "source_resistance": r_s},
            load,
        ],
        "lines": [{"from": "S", "to": "L", "resistance": r_line, "inductance": l_line}],
        "base": {"voltage": 48.0, "power": 500.0},
        "bounds": {"setpoint": [0.0, 200.0], "voltage": [1.0, 200.0], "generation": [0.0, 1e5]},
        "operating_halfwidth": {"current": 2.0, "voltage": 3.0},
    }


@pytest.fixture
def one_bus():
    return load_fixture("one_bus")


@pytest.fixture
def two_bus():
    return parse_network(line_network())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def dump(tmp_path, doc, name="net.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
