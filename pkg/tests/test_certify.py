import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcroa import conic
from dcroa.certify import (BETA_CAP, Certificate, EquilibriumTooClose, OperatingBox, assemble_stability_lmi,
                           certify, certify_point, codesign_linesearch, gevp_bisection, initial_h_guess,
                           sampled_lmi_max_eig, set_covering, shift_coordinates, sup_h, support_inf, voltage_floor)
from dcroa.netmodel import build_dynamics, halfwidth_vector, parse_network

from conftest import line_network


def _cqlf_threshold(L=1e-3, C=5e-4, R=0.5):
    """Largest h for which the 2x2 pair {A(0), A(h)} (decay-shifted) has a common
    quadratic Lyapunov function, by the pairwise eigenvalue test for 2x2 systems."""
    def A(h):
        return np.linalg.solve(np.diag([L, C]), np.array([[-R, -1.0], [1.0, h]])) + 0.5 * np.eye(2)

    def ok(h):
        A0, A1 = A(0.0), A(h)
        if np.linalg.eigvals(A1).real.max() >= 0:
            return False
        for M in (A0 @ A1, A0 @ np.linalg.inv(A1)):
            ev = np.linalg.eigvals(M)
            if np.any((np.abs(ev.imag) <= 1e-9 * np.abs(ev)) & (ev.real < 0)):
                return False
        return True

    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


@pytest.fixture(scope="module")
def one_bus_cert():
    from dcroa.netmodel import load_fixture

    return certify(load_fixture("one_bus"))


def test_shift_h_arithmetic(one_bus):
    M = build_dynamics(one_bus)
    sh = shift_coordinates(M, np.array([6.0, 60.0]))
    assert sh.h(np.array([0.0, -10.0]))[0] == pytest.approx(0.1)


def test_shift_matches_unshifted_field(one_bus, rng):
    M = build_dynamics(one_bus)
    u = np.array([64.8])
    v = 0.5 * (u[0] + np.sqrt(u[0] ** 2 - 4 * 0.5 * 300))
    xe = np.array([(u[0] - v) / 0.5, v])
    sh = shift_coordinates(M, xe)
    for _ in range(20):
        dx = rng.normal(size=2) * [5, 5]
        assert np.allclose(sh.field(dx), M.rhs(xe + dx, u), rtol=1e-12, atol=1e-9)
    assert np.allclose(sh.field(np.zeros(2)), 0, atol=1e-9)


def test_lmi_block_shape(two_bus):
    M = build_dynamics(two_bus)
    pr = assemble_stability_lmi(M, 1.0, np.array([0.01]))
    zero = {"P": np.zeros((3, 3)), "tau": np.zeros(1)}
    assert np.asarray(pr.nsd[0][1](zero)).shape == (4, 4)


def test_linear_limit_feasible(one_bus):
    M = build_dynamics(one_bus)
    rep, _ = conic.solve_lmi(assemble_stability_lmi(M, 1e-6, np.array([1.0])))
    assert rep.ok


def test_gevp_matches_common_lyapunov_oracle(one_bus):
    M = build_dynamics(one_bus)
    h0 = np.array([1.0])
    beta, P, unbounded = gevp_bisection(M, h0)
    assert not unbounded
    oracle = _cqlf_threshold()
    assert beta == pytest.approx(oracle, rel=2e-3)
    # pointwise Hurwitz (decay-shifted) threshold is an upper bound: (R/L - 1) C
    assert beta <= (0.5 / 1e-3 - 1.0) * 5e-4
    assert sampled_lmi_max_eig(M, P, beta, h0) <= 1e-7


def test_gevp_monotone(one_bus):
    M = build_dynamics(one_bus)
    h0 = np.array([1.0])
    for beta in (0.2, 0.1, 0.05):
        assert conic.solve_lmi(assemble_stability_lmi(M, beta, h0))[0].ok
    assert not conic.solve_lmi(assemble_stability_lmi(M, 0.3, h0))[0].ok


def test_gevp_unbounded_without_loads():
    spec = parse_network(line_network(cpl=0.0))
    beta, P, unbounded = gevp_bisection(build_dynamics(spec), np.zeros(1))
    assert unbounded and beta == BETA_CAP


def test_set_covering_small_cases():
    assert set_covering(np.eye(2), OperatingBox(np.ones(2))) == pytest.approx(2.0)
    assert set_covering(np.diag([1.0, 4.0]), OperatingBox(np.ones(2))) == pytest.approx(5.0)


def test_set_covering_grid_oracle(rng):
    for _ in range(5):
        Q = rng.normal(size=(4, 4))
        P = Q @ Q.T + 0.1 * np.eye(4)
        hw = rng.uniform(0.5, 2.0, 4)
        g = np.linspace(-1, 1, 11)
        grid = np.stack(np.meshgrid(g, g, g, g), -1).reshape(-1, 4) * hw
        dense = np.max(np.einsum("ij,jk,ik->i", grid, P, grid))
        assert set_covering(P, OperatingBox(hw)) == pytest.approx(dense, rel=1e-3)


def test_set_covering_dimension_cap():
    from dcroa.certify import CoveringTooLarge

    with pytest.raises(CoveringTooLarge):
        set_covering(np.eye(21), OperatingBox(np.ones(21)))


def test_support_inf_simple():
    assert support_inf(np.eye(3), np.eye(3)[[1]]) == pytest.approx([-1.0])
    assert support_inf(np.diag([1 / 4.0, 1 / 9.0]), np.eye(2)) == pytest.approx([-2.0, -3.0])


def test_support_inf_boundary_sampling(rng):
    for _ in range(3):
        Q = rng.normal(size=(3, 3))
        P = Q @ Q.T + 0.2 * np.eye(3)
        C = rng.normal(size=(2, 3))
        # boundary points x = L^{-T} w with |w| = 1
        L = np.linalg.cholesky(P)
        w = rng.normal(size=(400000, 3))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        X = np.linalg.solve(L.T, w.T).T
        sampled = (X @ C.T).min(axis=0)
        exact = support_inf(P, C)
        assert np.all(exact <= sampled + 1e-12)
        # refine the sampled minimiser by projected gradient on the sphere
        for k in range(2):
            c = np.linalg.solve(L, C[k])
            wk = w[np.argmin(X @ C[k])]
            for _ in range(200):
                wk = wk - 0.5 * c
                wk /= np.linalg.norm(wk)
            assert c @ wk == pytest.approx(exact[k], abs=1e-6)


def test_voltage_floor_special_cases():
    assert voltage_floor(np.array([-3.0]), np.array([0.0]), 1.0, np.array([0.0]))[0] == pytest.approx(3.0)
    assert voltage_floor(np.array([0.0]), np.array([-4.0]), 2.0, np.array([0.5]))[0] == pytest.approx(2.0)


def test_floor_binding_and_asymptote():
    d, p, bh = np.array([-20.0]), np.array([-300.0]), 0.1
    f = voltage_floor(d, p, 1.0, np.array([bh]))
    assert sup_h(f, d, p)[0] == pytest.approx(bh)
    assert sup_h(np.array([1e9]), d, p)[0] < 1e-12
    with pytest.raises(EquilibriumTooClose):
        sup_h(np.array([10.0]), d, p)


def test_floor_and_h_bound_equivalent(rng):
    trials = 10_000
    d = -rng.uniform(0.01, 50, trials)
    p = -rng.uniform(0, 1000, trials)
    bh = rng.uniform(1e-3, 10, trials)
    floor = voltage_floor(d, p, 1.0, bh)
    v = floor * rng.uniform(0.5, 1.5, trials)
    valid = v + d > 0
    s = sup_h(v[valid], d[valid], p[valid])
    lhs = s <= bh[valid] * (1 + 1e-12)
    rhs = v[valid] >= floor[valid] * (1 - 1e-12)
    assert np.array_equal(lhs, rhs)
    # below -d the quadratic floor is never met
    assert np.all(floor >= -d)


def test_one_bus_certificate(one_bus_cert):
    c = one_bus_cert
    assert c.floor[0] == pytest.approx(62.3, abs=0.5)
    assert np.all(c.dx_inf <= 0)
    assert np.all(c.floor >= -c.dx_inf)
    assert sampled_lmi_max_eig(c.matrices, c.sublevel.P, c.lpv.beta, c.lpv.h0) <= 1e-7
    # covering: every vertex inside the unit sublevel set, and P <= diag(gamma)
    assert set_covering(c.sublevel.P, c.box) <= 1 + 1e-6
    assert np.linalg.eigvalsh(c.sublevel.P - np.diag(c.sublevel.gamma)).max() <= 1e-7
    assert np.sum(c.sublevel.gamma * c.box.halfwidth**2) <= 1 + 1e-6


def test_certify_point_threshold(one_bus_cert):
    c = one_bus_cert
    assert certify_point(c, np.array([(64.8 - 62.8) / 0.5, 62.8]))
    assert not certify_point(c, np.array([1.0, 55.0]))


def test_certificate_round_trip(one_bus_cert):
    c = one_bus_cert
    again = Certificate.from_dict(c.to_dict(), c.matrices)
    assert np.array_equal(again.sublevel.P, c.sublevel.P)
    assert np.array_equal(again.floor, c.floor)
    assert again.network_hash == c.network_hash


def test_scaling_consistency(one_bus, one_bus_cert):
    from dcroa.netmodel import per_unit

    pu = certify(per_unit(one_bus))
    V0 = one_bus.base_voltage
    assert pu.floor[0] * V0 == pytest.approx(one_bus_cert.floor[0], rel=2e-3)
    for v in (60.0, 62.0, 63.0, 70.0):
        x = np.array([0.0, v])
        assert certify_point(one_bus_cert, x) == certify_point(pu, x / V0)


def test_no_load_network_trivial():
    spec = parse_network(line_network(cpl=0.0))
    c = certify(spec)
    assert c.lpv.unbounded
    assert np.allclose(c.floor, -c.dx_inf)


def test_initial_guess_recipe(one_bus):
    M = build_dynamics(one_bus)
    h0 = initial_h_guess(one_bus, M, halfwidth_vector(one_bus))
    # voltage lower bound 1 V minus 20 V half-width is clipped at 10 % of 60 V
    assert h0[0] == pytest.approx(300 / 6.0**2)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.3))
def test_codesign_monotone_in_beta(frac):
    spec = parse_network(line_network(cpl=-100.0))
    M = build_dynamics(spec)
    box = OperatingBox(halfwidth_vector(spec))
    h0 = initial_h_guess(spec, M, box.halfwidth)
    from dcroa.certify import codesign_problem

    hi_ok = conic.solve_lmi(codesign_problem(M, frac * 2, h0, box, objective=False))[0].ok
    lo_ok = conic.solve_lmi(codesign_problem(M, frac, h0, box, objective=False))[0].ok
    assert lo_ok or not hi_ok


def test_linesearch_returns_valid_set(two_bus):
    M = build_dynamics(two_bus)
    box = OperatingBox(halfwidth_vector(two_bus))
    h0 = initial_h_guess(two_bus, M, box.halfwidth)
    lpv, sub = codesign_linesearch(M, box, h0)
    vertices = box.vertices()
    assert np.max(sub.value(vertices)) <= 1 + 1e-6
    assert sampled_lmi_max_eig(M, sub.P, lpv.beta, lpv.h0) <= 1e-7
