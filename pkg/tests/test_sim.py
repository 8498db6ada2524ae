import numpy as np
import pytest

from dcroa.netmodel import build_dynamics, parse_network
from dcroa.sim import (CONVERGED, DIVERGED, SimOptions, SimulationError, Units, borderline_design, box_vertices,
                       lyapunov_trace, relative_difference, roa_grid_2d, simulate, simulate_many, vertex_sweep)
from dcroa.steadystate import power_flow

from conftest import line_network


def _eq(M, u):
    return power_flow(M, np.array([u])).x


@pytest.fixture
def one(one_bus):
    M = build_dynamics(one_bus)
    return M, Units.of(one_bus, M)


def test_equilibrium_start_converges(one):
    M, U = one
    xe = _eq(M, 64.8)
    tr = simulate(M, 64.8, xe, xe, units=U)
    assert tr.classification == CONVERGED
    assert tr.final_distance <= 1e-7
    assert np.all(np.diff(tr.t) > 0)


def test_vertices_converge_at_synthesized_input(one):
    M, U = one
    xe = _eq(M, 64.8)
    trajs = vertex_sweep(M, 64.8, xe, np.array([20.0, 20.0]), units=U)
    assert [t.classification for t in trajs] == [CONVERGED] * 4


def test_low_input_diverges(one):
    M, U = one
    xe = _eq(M, 50.0)
    tr = simulate(M, 50.0, xe + np.array([-20.0, -20.0]), xe, units=U)
    assert tr.classification == DIVERGED
    assert tr.min_load_voltage <= 1.0


def test_sampled_and_fast_paths_agree(one):
    M, U = one
    xe = _eq(M, 58.0)
    starts = box_vertices(xe, np.array([20.0, 20.0]))
    slow = [t.classification for t in simulate_many(M, 58.0, starts, xe, units=U, keep=True)]
    fast = [t.classification for t in simulate_many(M, 58.0, starts, xe, units=U, keep=False)]
    assert slow == fast


def test_rk4_fourth_order(one):
    M, U = one
    xe = _eq(M, 80.0)
    x0 = xe + np.array([5.0, -5.0])
    ref = simulate(M, 80.0, x0, xe, SimOptions(t_max=0.004, samples=2, rtol=1e-12, atol=1e-14), units=U).x[-1]
    errs = []
    for h in (2e-5, 1e-5):
        run = simulate(M, 80.0, x0, xe, SimOptions(integrator="rk4", step=h, t_max=0.004, samples=2), units=U)
        errs.append(np.max(np.abs(run.x[-1] - ref)))
    assert errs[0] / errs[1] >= 8.0


def test_no_load_always_converges(rng):
    spec = parse_network(line_network(cpl=0.0))
    M = build_dynamics(spec)
    U = Units.of(spec, M)
    xe = _eq(M, 48.0)
    starts = xe + rng.uniform(-20, 20, size=(30, 3))
    assert all(t.converged for t in simulate_many(M, 48.0, starts, xe, units=U, keep=False))


def test_energy_non_increasing_unforced():
    spec = parse_network(line_network(cpl=0.0))
    M = build_dynamics(spec)
    x0 = np.array([3.0, 10.0, 5.0])
    tr = simulate(M, 0.0, x0, np.zeros(3), SimOptions(t_max=0.05, samples=400))
    E = 0.5 * np.einsum("ki,ij,kj->k", tr.x, M.D, tr.x)
    assert np.max(np.diff(E)) <= 1e-12 * E[0]


def test_lyapunov_trace_equilibrium(one):
    M, U = one
    xe = _eq(M, 64.8)
    tr = simulate(M, 64.8, xe, xe, units=U)
    V, worst = lyapunov_trace(tr, np.eye(2), xe)
    assert np.max(V) <= 1e-10 and worst <= 1e-9


def test_roa_map_properties(one):
    M, U = one
    m = roa_grid_2d(M, 64.8, np.array([60.0, 60.0]), points=31, units=U, refine=3)
    assert m.contains_box(np.array([20.0, 20.0]))
    assert m.converged.any() and not m.converged.all()
    assert len(m.boundary) > 0
    big = roa_grid_2d(M, 200.0, np.array([60.0, 60.0]), points=21, units=U, refine=0)
    assert big.contains_box(np.array([40.0, 40.0]))


def test_roa_map_no_load():
    doc = {"buses": [{"id": "1", "capacitance": 5e-4, "has_source": True, "source_resistance": 0.5,
                      "source_inductance": 1e-3, "has_cpl": True, "cpl_power": 0.0}],
           "lines": [], "base": {"voltage": 60.0, "power": 300.0},
           "bounds": {"setpoint": [0, 1000], "voltage": [1, 1000], "generation": [0, 1e6]},
           "operating_halfwidth": {"current": 20.0, "voltage": 20.0}}
    spec = parse_network(doc)
    M = build_dynamics(spec)
    m = roa_grid_2d(M, 60.0, np.array([50.0, 50.0]), points=11, units=Units.of(spec, M), refine=0)
    assert m.converged.all()


def test_borderline_bracket_errors(one):
    from dcroa.sim import BorderlineError

    M, U = one
    with pytest.raises(BorderlineError):
        borderline_design(M, np.array([20.0, 20.0]), bracket=(40.0, 45.0), units=U)


def test_relative_difference():
    assert relative_difference(64.8, 59.4) == pytest.approx(0.0909, abs=1e-4)
    assert relative_difference(3.0, 3.0) == 0.0
    with pytest.raises(ValueError):
        relative_difference(1.0, 0.0)


def test_options_validation():
    with pytest.raises(ValueError):
        SimOptions(t_max=0)
    with pytest.raises(ValueError):
        SimOptions(integrator="euler")


def test_positive_initial_voltage_required(one):
    M, U = one
    with pytest.raises(ValueError):
        simulate(M, 64.8, np.array([0.0, -1.0]), _eq(M, 64.8), units=U)


def test_integrator_failure_is_reported():
    # an unstable fixed step on a stiff linear circuit overflows; that must raise, not classify
    M = build_dynamics(parse_network(line_network(cpl=0.0)))
    xe = _eq(M, 48.0)
    blowup = SimOptions(integrator="rk4", step=0.05, t_max=50.0)
    with pytest.raises(SimulationError):
        with np.errstate(all="ignore"):
            simulate_many(M, 48.0, xe[None, :] + 1.0, xe, blowup, keep=False)


def test_vertex_sweep_extends_horizon_for_ringing_network():
    # lightly damped line: the error is still ~1e-3 per-unit after half a second
    doc = line_network(cpl=-98.3, r_line=0.1157, l_line=1.482e-3, r_s=0.1558)
    doc["buses"][0]["capacitance"], doc["buses"][1]["capacitance"] = 6.556e-4, 9.882e-4
    spec = parse_network(doc)
    M = build_dynamics(spec)
    xe = power_flow(M, np.array([25.76])).x
    hw = np.array([1.213, 0.829, 0.829])
    units = Units.of(spec, M)
    short = vertex_sweep(M, 25.76, xe, hw, SimOptions(t_max=0.5), units=units, extend=0)
    assert any(t.classification == "undecided" for t in short)
    assert all(t.classification != "diverged" for t in short)
    full = vertex_sweep(M, 25.76, xe, hw, SimOptions(t_max=0.5), units=units)
    assert all(t.converged for t in full)
