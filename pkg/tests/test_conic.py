import cvxpy as cp
import numpy as np
import pytest

from dcroa import conic
from dcroa.conic import LmiProblem, SocpProblem, check_lmi, solve_lmi, solve_maxlogdet, solve_socp


def test_min_trace_above_identity():
    pr = LmiProblem(symmetric={"X": 2}, psd=[("X >= I", lambda v: v["X"] - np.eye(2))],
                    minimize=lambda v: cp.trace(v["X"]) if isinstance(v["X"], cp.Expression) else np.trace(v["X"]))
    rep, val = solve_lmi(pr)
    assert rep.ok
    assert np.allclose(val["X"], np.eye(2), atol=1e-6)
    assert rep.primal_residual <= 1e-7


def test_maxlogdet_under_diagonal_cap():
    cap = np.diag([1.0, 4.0])
    pr = LmiProblem(symmetric={"P": 2}, nsd=[("P <= cap", lambda v: v["P"] - cap)], maximize_logdet="P")
    rep, val = solve_maxlogdet(pr)
    assert rep.ok
    assert np.allclose(val["P"], cap, atol=1e-5)


def test_infeasible_lmi_reported():
    pr = LmiProblem(symmetric={"X": 2}, psd=[("X >= I", lambda v: v["X"] - np.eye(2))],
                    nsd=[("X <= -I", lambda v: v["X"] + np.eye(2))])
    rep, val = solve_lmi(pr)
    assert rep.status == conic.INFEASIBLE
    assert val is None


def test_independent_checker_flags_violation():
    pr = LmiProblem(symmetric={"X": 2}, psd=[("X >= I", lambda v: v["X"] - np.eye(2))])
    bad = check_lmi(pr, {"X": 0.5 * np.eye(2)})
    good = check_lmi(pr, {"X": 2 * np.eye(2)})
    assert not bad.ok and good.ok
    assert min(bad.psd_margins) == pytest.approx(-0.5)


def test_lyapunov_lmi_matches_eigenvalues():
    # a stable A admits P with A'P + PA <= -I; an unstable one does not
    for A, expect in ((np.array([[-1.0, 2.0], [0.0, -3.0]]), True), (np.array([[0.5, 0.0], [1.0, -1.0]]), False)):
        pr = LmiProblem(symmetric={"P": 2}, psd=[("P >= I", lambda v: v["P"] - np.eye(2))],
                        nsd=[("lyap", lambda v, A=A: A.T @ v["P"] + v["P"] @ A + np.eye(2))])
        rep, _ = solve_lmi(pr)
        assert rep.ok is expect


def test_size_cap():
    pr = LmiProblem(symmetric={"P": 80}, psd=[("P", lambda v: v["P"])])
    with pytest.raises(conic.ConicError, match="exceeds"):
        solve_lmi(pr)


def test_socp_norm():
    # min x s.t. ||(1,1)|| <= x
    pr = SocpProblem(c=np.array([1.0]), cones=[(np.zeros((2, 1)), np.array([1.0, 1.0]), np.array([1.0]), 0.0)])
    rep, x = solve_socp(pr)
    assert rep.ok
    assert x[0] == pytest.approx(np.sqrt(2), abs=1e-7)


def test_socp_degenerates_to_lp():
    # min -x - y over the box [0,1]^2 and x + y <= 1.5
    G = np.vstack([np.eye(2), -np.eye(2), [[1.0, 1.0]]])
    h = np.array([1, 1, 0, 0, 1.5])
    rep, x = solve_socp(SocpProblem(c=np.array([-1.0, -1.0]), G=G, h=h))
    assert rep.ok
    assert -rep.objective == pytest.approx(1.5, abs=1e-7)
    assert rep.dual_residual <= 1e-6


def test_socp_dimension_check():
    with pytest.raises(conic.ConicError):
        solve_socp(SocpProblem(c=np.ones(2), G=np.ones((1, 3)), h=np.ones(1)))
