import json

import pytest

from dcroa import cli
from dcroa.netmodel import fixture_path, load_fixture, to_document

from conftest import dump, line_network

ONE_BUS = str(fixture_path("one_bus"))


def test_certify_then_synthesize(tmp_path, capsys):
    out = tmp_path / "cert"
    assert cli.main(["certify", "--network", ONE_BUS, "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["voltage_floor_volts"][0] == pytest.approx(62.3, abs=0.5)
    assert len(rep["manifest"]["network_hash"]) == 64
    assert "step1_linesearch" in json.loads((out / "timings.json").read_text())
    syn = tmp_path / "syn"
    rc = cli.main(["synthesize", "--network", ONE_BUS, "--certificate", str(out / "certificate.json"),
                   "--out", str(syn)])
    assert rc == 0
    rep = json.loads((syn / "report.json").read_text())
    assert rep["setpoints_volts"][0] == pytest.approx(64.8, rel=0.02)
    assert rep["result"]["relaxation"] == "exact"


def test_reports_are_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["certify", "--network", ONE_BUS, "--out", str(d)]) == 0
    for name in ("report.json", "certificate.json"):
        ra, rb = json.loads((a / name).read_text()), json.loads((b / name).read_text())
        ra.get("manifest", {}).get("options", {}).pop("out", None)
        rb.get("manifest", {}).get("options", {}).pop("out", None)
        assert ra == rb


def test_certificate_for_other_network_rejected(tmp_path):
    out = tmp_path / "cert"
    assert cli.main(["certify", "--network", ONE_BUS, "--out", str(out)]) == 0
    other = dump(tmp_path, line_network())
    rc = cli.main(["synthesize", "--network", str(other), "--certificate", str(out / "certificate.json"),
                   "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_PARSE


def test_corrupt_input_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert cli.main(["certify", "--network", str(bad), "--out", str(tmp_path)]) == cli.EXIT_PARSE
    assert "JSON" in capsys.readouterr().err
    assert cli.main(["certify", "--network", str(tmp_path / "missing.json")]) == cli.EXIT_PARSE
    assert cli.main(["nonsense"]) == cli.EXIT_PARSE


def test_floor_infeasible_exit_code(tmp_path, capsys):
    doc = to_document(load_fixture("one_bus"))
    doc["bounds"]["voltage"] = [1.0, 61.0]
    net = dump(tmp_path, doc)
    rc = cli.main(["synthesize", "--network", str(net), "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_INFEASIBLE
    assert "floor" in capsys.readouterr().err


def test_simulate_vertices(tmp_path):
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--network", ONE_BUS, "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["counts"]["converged"] == 4
    assert (out / "vertices.csv").read_text().count("converged") == 4


def test_roa2d_outputs(tmp_path):
    out = tmp_path / "roa"
    rc = cli.main(["roa2d", "--network", ONE_BUS, "--u", "64.8", "--points", "21", "--out", str(out)])
    assert rc == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["box_inside"]
    assert (out / "grid.csv").read_text().splitlines()[0].startswith("i[src 1]")
    assert len((out / "boundary.csv").read_text().splitlines()) > 1


def test_box_override(tmp_path):
    out = tmp_path / "box"
    assert cli.main(["certify", "--network", ONE_BUS, "--box", "10,20", "--out", str(out)]) == 0
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["halfwidth"] == [10.0, 20.0]
    assert cli.main(["certify", "--network", ONE_BUS, "--box", "1,2,3", "--out", str(out)]) == cli.EXIT_PARSE


def test_sensitivity_sweep(tmp_path):
    out = tmp_path / "sens"
    rc = cli.main(["sensitivity", "--network", ONE_BUS, "--parameter", "cpl", "--values", "300,3000",
                   "--out", str(out)])
    assert rc == 0
    rows = json.loads((out / "report.json").read_text())["rows"]
    assert rows[0]["u"][0] == pytest.approx(64.8, rel=0.02)
    assert rows[1]["u"][0] == pytest.approx(145.9, rel=0.02)
    assert (out / "sensitivity.csv").exists()
