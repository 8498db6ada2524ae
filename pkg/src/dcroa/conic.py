"""Small dense conic problems: LMI feasibility, max-log-det and SOCP.

Problems are declared with affine constraint callables that accept a mapping
of variable values and return an expression.  The same callable builds the
cvxpy model (when handed cvxpy variables) and is re-evaluated with plain
numpy arrays by :func:`check_lmi` / :func:`check_socp`, which verify returned
assignments without touching the solver.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import cvxpy as cp
import numpy as np

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"

MAX_VARIABLES = 2000


class ConicError(RuntimeError):
    """Malformed problem (dimension mismatch, too large)."""


@dataclass(frozen=True)
class Tolerances:
    residual: float = 1e-8
    check_residual: float = 1e-7
    psd: float = 1e-7
    bisection: float = 1e-3


DEFAULT_TOL = Tolerances()


@dataclass
class SolveReport:
    status: str
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")
    psd_margins: tuple[float, ...] = ()
    objective: float = float("nan")
    solver_status: str = ""
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def block(rows):
    """``np.block`` for numbers, ``cp.bmat`` as soon as a cvxpy expression appears."""
    if any(isinstance(x, cp.Expression) for row in rows for x in row):
        return cp.bmat(rows)
    return np.block(rows)


Affine = Callable[[Mapping[str, object]], object]


@dataclass
class LmiProblem:
    """Symmetric-matrix, vector and scalar variables with affine constraints.

    ``psd`` entries are required to be positive semidefinite and ``nsd``
    entries negative semidefinite; ``nonneg`` and ``eq`` are elementwise.
    The objective is either ``maximize log det`` of one symmetric variable,
    a linear ``minimize`` callable, or nothing (feasibility).
    """

    symmetric: dict[str, int] = field(default_factory=dict)
    vectors: dict[str, int] = field(default_factory=dict)
    psd: list[tuple[str, Affine]] = field(default_factory=list)
    nsd: list[tuple[str, Affine]] = field(default_factory=list)
    nonneg: list[tuple[str, Affine]] = field(default_factory=list)
    eq: list[tuple[str, Affine]] = field(default_factory=list)
    maximize_logdet: str | None = None
    minimize: Affine | None = None

    def size(self) -> int:
        return sum(k * (k + 1) // 2 for k in self.symmetric.values()) + sum(self.vectors.values())

    def all_cones(self):
        for name, fn in self.psd:
            yield name, fn, 1.0
        for name, fn in self.nsd:
            yield name, fn, -1.0


def _cvx_vars(problem: LmiProblem):
    out = {k: cp.Variable((d, d), symmetric=True, name=k) for k, d in problem.symmetric.items()}
    out.update({k: cp.Variable(d, name=k) for k, d in problem.vectors.items()})
    return out


def _sym(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return 0.5 * (M + M.T)


def _validate(problem: LmiProblem) -> None:
    if problem.size() > MAX_VARIABLES:
        raise ConicError(f"{problem.size()} scalar unknowns exceeds the cap of {MAX_VARIABLES}")
    zero = {k: np.zeros((d, d)) for k, d in problem.symmetric.items()}
    zero.update({k: np.zeros(d) for k, d in problem.vectors.items()})
    for name, fn, _ in problem.all_cones():
        M = np.atleast_2d(np.asarray(fn(zero), dtype=float))
        if M.shape[0] != M.shape[1]:
            raise ConicError(f"LMI {name!r} is not square: {M.shape}")
    if problem.maximize_logdet and problem.maximize_logdet not in problem.symmetric:
        raise ConicError(f"log-det variable {problem.maximize_logdet!r} is not a symmetric variable")


def solve_lmi(problem: LmiProblem, tol: Tolerances = DEFAULT_TOL):
    """Solve an LMI problem; returns ``(SolveReport, assignment)``.

    ``assignment`` is ``None`` unless the report status is optimal.  Optimal
    assignments have been re-checked by :func:`check_lmi`.
    """
    _validate(problem)
    V = _cvx_vars(problem)
    cons = []
    for _, fn, sign in problem.all_cones():
        expr = fn(V)
        expr = sign * expr
        cons.append(0.5 * (expr + expr.T) >> 0)
    for _, fn in problem.nonneg:
        cons.append(fn(V) >= 0)
    for _, fn in problem.eq:
        cons.append(fn(V) == 0)
    if problem.maximize_logdet:
        obj = cp.Minimize(-cp.log_det(V[problem.maximize_logdet]))
    elif problem.minimize is not None:
        obj = cp.Minimize(problem.minimize(V))
    else:
        obj = cp.Minimize(0)
    prob = cp.Problem(obj, cons)
    report = _run(prob, tol)
    if report.status != OPTIMAL:
        return report, None
    values = {k: np.array(v.value, dtype=float) for k, v in V.items()}
    for k in problem.symmetric:
        values[k] = _sym(values[k])
    check = check_lmi(problem, values, tol)
    check.solver_status = report.solver_status
    check.dual_residual = _lmi_dual_residual(problem, values, cons)
    if problem.maximize_logdet:
        check.objective = float(np.linalg.slogdet(values[problem.maximize_logdet])[1])
    elif problem.minimize is not None:
        check.objective = float(problem.minimize(values))
    else:
        check.objective = 0.0
    if check.status != OPTIMAL:
        log.debug("solver claimed %s but the independent check failed: %s", report.solver_status, check.message)
        return check, None
    return check, values


def solve_maxlogdet(problem: LmiProblem, tol: Tolerances = DEFAULT_TOL):
    if not problem.maximize_logdet:
        raise ConicError("problem has no log-det objective")
    return solve_lmi(problem, tol)


def _run(prob: cp.Problem, tol: Tolerances) -> SolveReport:
    opts = dict(tol_gap_abs=tol.residual, tol_gap_rel=tol.residual, tol_feas=tol.residual, max_iter=200)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            prob.solve(solver="CLARABEL", **opts)
    except cp.error.SolverError as exc:
        return SolveReport(NUMERICAL_FAILURE, solver_status="error", message=str(exc))
    st = prob.status
    if st == cp.OPTIMAL or st == cp.OPTIMAL_INACCURATE:
        return SolveReport(OPTIMAL, solver_status=st, objective=float(prob.value))
    if st in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SolveReport(INFEASIBLE, solver_status=st, message="solver returned a primal infeasibility certificate")
    return SolveReport(NUMERICAL_FAILURE, solver_status=st, message=f"solver stopped with status {st}")


def check_lmi(problem: LmiProblem, values: Mapping[str, np.ndarray], tol: Tolerances = DEFAULT_TOL) -> SolveReport:
    """Independent feasibility check of an assignment (numpy only)."""
    margins = []
    worst = ""
    for name, fn, sign in problem.all_cones():
        M = sign * _sym(fn(values))
        lam = float(np.linalg.eigvalsh(M).min())
        margins.append(lam)
        if lam < -tol.psd:
            worst = f"LMI {name!r} violated: min eigenvalue {lam:.3e}"
    res = 0.0
    for name, fn in problem.nonneg:
        g = np.atleast_1d(np.asarray(fn(values), dtype=float))
        viol = float(np.max(np.maximum(-g, 0.0), initial=0.0))
        res = max(res, viol)
    for name, fn in problem.eq:
        h = np.atleast_1d(np.asarray(fn(values), dtype=float))
        res = max(res, float(np.max(np.abs(h), initial=0.0)))
    if res > tol.check_residual and not worst:
        worst = f"linear constraint residual {res:.3e}"
    if problem.maximize_logdet:
        if np.linalg.eigvalsh(values[problem.maximize_logdet]).min() <= 0:
            worst = worst or "log-det variable is not positive definite"
    status = NUMERICAL_FAILURE if worst else OPTIMAL
    return SolveReport(status, primal_residual=res, psd_margins=tuple(margins), message=worst)


def _lmi_dual_residual(problem: LmiProblem, values, cons) -> float:
    """Stationarity of the Lagrangian, differentiated through the affine maps."""
    duals = [c.dual_value for c in cons]
    if any(d is None for d in duals):
        return float("nan")
    fns = [(fn, sign, "cone") for _, fn, sign in problem.all_cones()]
    fns += [(fn, 1.0, "nonneg") for _, fn in problem.nonneg]
    fns += [(fn, 1.0, "eq") for _, fn in problem.eq]

    def lagrangian_terms(vals):
        total = 0.0
        for (fn, sign, kind), dual in zip(fns, duals):
            val = np.asarray(fn(vals), dtype=float)
            if kind == "cone":
                total -= np.sum(np.asarray(dual) * sign * _sym(val))
            elif kind == "nonneg":
                total -= np.sum(np.asarray(dual) * val)
            else:
                total += np.sum(np.asarray(dual) * val)
        if problem.minimize is not None and not problem.maximize_logdet:
            total += float(problem.minimize(vals))
        return total

    base = lagrangian_terms(values)
    grads = []
    for k, d in problem.symmetric.items():
        inv = np.linalg.inv(values[k]) if problem.maximize_logdet == k else None
        for i in range(d):
            for j in range(i, d):
                E = np.zeros((d, d))
                E[i, j] = E[j, i] = 1.0
                vals = dict(values)
                vals[k] = values[k] + E
                g = lagrangian_terms(vals) - base
                if inv is not None:
                    g -= np.sum(inv * E)
                grads.append(g)
    for k, d in problem.vectors.items():
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            vals = dict(values)
            vals[k] = values[k] + e
            grads.append(lagrangian_terms(vals) - base)
    return float(np.max(np.abs(grads), initial=0.0))


# ---------------------------------------------------------------------------
# SOCP


@dataclass
class SocpProblem:
    """minimize c.x  s.t.  A_eq x = b_eq,  G x <= h,  ||F_i x + g_i|| <= e_i.x + f_i."""

    c: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    cones: list[tuple[np.ndarray, np.ndarray, np.ndarray, float]] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return len(self.c)

    def validate(self) -> None:
        n = self.dim
        if self.A_eq is not None and (self.A_eq.shape[1] != n or self.A_eq.shape[0] != len(self.b_eq)):
            raise ConicError("equality block has inconsistent dimensions")
        if self.G is not None and (self.G.shape[1] != n or self.G.shape[0] != len(self.h)):
            raise ConicError("inequality block has inconsistent dimensions")
        for F, g, e, _ in self.cones:
            if F.shape[1] != n or F.shape[0] != len(g) or len(e) != n:
                raise ConicError("cone block has inconsistent dimensions")


def solve_socp(problem: SocpProblem, tol: Tolerances = DEFAULT_TOL):
    problem.validate()
    x = cp.Variable(problem.dim)
    cons = []
    if problem.A_eq is not None and len(problem.b_eq):
        cons.append(problem.A_eq @ x == problem.b_eq)
    if problem.G is not None and len(problem.h):
        cons.append(problem.G @ x <= problem.h)
    for F, g, e, f in problem.cones:
        cons.append(cp.SOC(e @ x + f, F @ x + g))
    prob = cp.Problem(cp.Minimize(problem.c @ x), cons)
    report = _run(prob, tol)
    if report.status != OPTIMAL:
        return report, None
    xv = np.array(x.value, dtype=float)
    check = check_socp(problem, xv, tol)
    check.solver_status = report.solver_status
    check.objective = float(problem.c @ xv)
    check.dual_residual = _socp_dual_residual(problem, cons)
    if check.status != OPTIMAL:
        return check, None
    return check, xv


def check_socp(problem: SocpProblem, x: np.ndarray, tol: Tolerances = DEFAULT_TOL) -> SolveReport:
    res = 0.0
    if problem.A_eq is not None and len(problem.b_eq):
        scale = 1.0 + np.abs(problem.b_eq)
        res = max(res, float(np.max(np.abs(problem.A_eq @ x - problem.b_eq) / scale)))
    if problem.G is not None and len(problem.h):
        scale = 1.0 + np.abs(problem.h)
        res = max(res, float(np.max(np.maximum(problem.G @ x - problem.h, 0) / scale)))
    margins = []
    for F, g, e, f in problem.cones:
        t = float(e @ x + f)
        margins.append(t - float(np.linalg.norm(F @ x + g)))
    cone_viol = max([-m for m in margins] + [0.0])
    ok = res <= tol.check_residual and cone_viol <= tol.check_residual * (1 + np.max(np.abs(x)))
    msg = "" if ok else f"residual {res:.3e}, cone violation {cone_viol:.3e}"
    return SolveReport(OPTIMAL if ok else NUMERICAL_FAILURE, primal_residual=max(res, cone_viol),
                       psd_margins=tuple(margins), message=msg)


def _socp_dual_residual(problem: SocpProblem, cons) -> float:
    grad = np.array(problem.c, dtype=float)
    k = 0
    if problem.A_eq is not None and len(problem.b_eq):
        y = cons[k].dual_value
        k += 1
        if y is None:
            return float("nan")
        grad = grad + problem.A_eq.T @ y
    if problem.G is not None and len(problem.h):
        z = cons[k].dual_value
        k += 1
        if z is None:
            return float("nan")
        grad = grad + problem.G.T @ z
    for F, g, e, f in problem.cones:
        d = cons[k].dual_value
        k += 1
        if d is None:
            return float("nan")
        t_dual, v_dual = float(np.ravel(d[0])[0]), np.ravel(d[1])
        grad = grad - e * t_dual - F.T @ v_dual
    return float(np.max(np.abs(grad)) / (1.0 + np.max(np.abs(problem.c))))
