"""Power flow, OPF and stability-constrained setpoint synthesis.

The OPF-type problems are solved through the standard second-order-cone
relaxation of the DC power-flow equations (squared voltages and branch
products as variables).  The relaxed optimum is mapped back to voltages and
checked against the nonlinear equations; when the check fails the point is
refined by a reduced-space NLP over the setpoints (power flow inside).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import conic
from .certify import Certificate, certify, certify_point
from .conic import SocpProblem
from .netmodel import NetworkSpec, SystemMatrices, build_dynamics, working_model

log = logging.getLogger(__name__)

EXACT_TOL = 1e-6
PF_TOL = 1e-10
FLOOR_MARGIN = 1e-7  # relative tightening of the voltage floor inside the conic solve
BOUND_SLACK = 1e-7


class PowerFlowError(RuntimeError):
    pass


class SynthesisInfeasible(RuntimeError):
    """``kind`` is ``"floor"`` when the voltage floor alone causes infeasibility, else ``"bounds"``."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class OperatingPoint:
    u: np.ndarray
    v: np.ndarray  # every bus voltage, in state order
    x: np.ndarray
    p_s: np.ndarray
    v_load: np.ndarray
    residual: float

    def to_dict(self, matrices: SystemMatrices | None = None) -> dict:
        d = {
            "u": self.u.tolist(),
            "v_load": self.v_load.tolist(),
            "p_s": self.p_s.tolist(),
            "x": self.x.tolist(),
            "residual": self.residual,
        }
        if matrices is not None:
            d["state_labels"] = list(matrices.layout.labels)
        return d


@dataclass
class SynthesisSpec:
    network: NetworkSpec
    matrices: SystemMatrices
    floor: np.ndarray | None = None  # per CPL bus; None for the plain OPF
    objective: str = "auto"  # "cost", "min_setpoint" or "auto"

    def __post_init__(self):
        if any(c < 0 for c in self.network.cost_vector()):
            raise ValueError("cost coefficients must be non-negative")


@dataclass
class SynthesisResult:
    point: OperatingPoint
    objective: float
    relaxation: str  # "exact", "refined" or "inexact"
    verdict: bool | None
    conic_residual: float = float("nan")
    dual_residual: float = float("nan")
    timings: dict = field(default_factory=dict)

    def to_dict(self, matrices: SystemMatrices | None = None) -> dict:
        return {
            "operating_point": self.point.to_dict(matrices),
            "objective": self.objective,
            "relaxation": self.relaxation,
            "certified": self.verdict,
            "conic_residual": self.conic_residual,
            "timings": dict(self.timings),
        }


# ---------------------------------------------------------------------------
# power flow


def bus_power(matrices: SystemMatrices) -> np.ndarray:
    """CPL power at every bus in state order (zero for buses without a CPL)."""
    lay = matrices.layout
    p = np.zeros(len(lay.voltage_idx))
    p[lay.load_idx - lay.voltage_idx[0]] = matrices.cpl_power
    return p


def power_flow_residual(matrices: SystemMatrices, u: np.ndarray, v: np.ndarray) -> float:
    """Scaled residual of the load-side power-flow equations."""
    p = bus_power(matrices)
    r = v * (matrices.Y_ll @ v + matrices.Y_ls @ u) - p
    return float(np.max(np.abs(r)) / max(1.0, np.max(np.abs(p))))


def _recover_state(matrices: SystemMatrices, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    lay = matrices.layout
    x = np.zeros(matrices.n)
    x[lay.voltage_idx] = v
    # branch currents from the steady-state circuit: D dx/dt = 0 on each branch row
    # A[k,k] i_k + A[k,volt] v + input = 0
    A = matrices.A
    for k in lay.branch_idx:
        drive = A[k, lay.voltage_idx] @ v + matrices.B2[k] @ (matrices.input_gain * u)
        x[k] = -drive / A[k, k]
    return x


def power_flow(matrices: SystemMatrices, u: np.ndarray, v0: np.ndarray | None = None,
               max_iter: int = 50) -> OperatingPoint:
    """Newton solve of the current-balance form of the power-flow equations.

    Starts from the zero-load solution (high-voltage branch) unless ``v0`` is
    given and rejects solutions on the low-voltage branch.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    Y, Yls = matrices.Y_ll, matrices.Y_ls
    p = bus_power(matrices)
    inj = Yls @ u
    v = np.linalg.solve(Y, -inj) if v0 is None else np.array(v0, dtype=float)
    if np.any(v <= 0):
        raise PowerFlowError("zero-load voltages are not positive; no high-voltage solution")
    scale = max(1.0, np.max(np.abs(inj)))

    def F(v):
        return Y @ v + inj - p / v

    f = F(v)
    for it in range(max_iter):
        if np.max(np.abs(f)) / scale <= PF_TOL:
            break
        J = Y + np.diag(p / v**2)
        dv = np.linalg.solve(J, -f)
        t = 1.0
        while True:
            cand = v + t * dv
            if np.all(cand > 0):
                fc = F(cand)
                if np.linalg.norm(fc) < (1 - 1e-4 * t) * np.linalg.norm(f) or t < 1e-8:
                    break
            t *= 0.5
            if t < 1e-12:
                raise PowerFlowError(f"Newton line search failed; residual {np.max(np.abs(f)):.3e}")
        v, f = cand, fc
    else:
        raise PowerFlowError(f"Newton did not converge; final residual {np.max(np.abs(f)) / scale:.3e}")
    J = Y + np.diag(p / v**2)
    if np.linalg.eigvalsh(0.5 * (J + J.T)).min() <= 0:
        raise PowerFlowError("converged to a low-voltage (unstable) power-flow branch")
    x = _recover_state(matrices, u, v)
    p_s = u * (matrices.Y_ss @ u + matrices.Y_sl @ v)
    return OperatingPoint(u, v, x, p_s, matrices.C1 @ x, power_flow_residual(matrices, u, v))


# ---------------------------------------------------------------------------
# conic relaxation


@dataclass
class _Relaxation:
    problem: SocpProblem
    ns: int
    nb: int
    vscale: float
    edges: list  # (node_i, node_j) over the node set sources + buses


def _node_bounds(spec: NetworkSpec, matrices: SystemMatrices, floor):
    lay = matrices.layout
    ids = lay.voltage_bus_ids
    bus_of = {b.id: b for b in spec.buses}
    lo = np.array([spec.bus_voltage_bounds(bus_of[i])[0] for i in ids])
    hi = np.array([spec.bus_voltage_bounds(bus_of[i])[1] for i in ids])
    if floor is not None:
        pos = lay.load_idx - lay.voltage_idx[0]
        lo[pos] = np.maximum(lo[pos], np.asarray(floor) * (1 + FLOOR_MARGIN))
    return np.maximum(lo, 0.0), hi


def _objective_kind(spec: NetworkSpec, objective: str) -> str:
    if objective == "auto":
        return "min_setpoint" if spec.n_s == 1 else "cost"
    return objective


def _build_relaxation(spec: NetworkSpec, matrices: SystemMatrices, floor, objective: str) -> _Relaxation:
    ns, nb = matrices.n_s, len(matrices.layout.voltage_idx)
    vs = 1.0 if spec.normalized else spec.base_voltage
    # node k < ns: source terminal k; node ns + j: bus j (state order)
    Y = np.block([[matrices.Y_ss, matrices.Y_sl], [matrices.Y_ls, matrices.Y_ll]])
    N = ns + nb
    edges = [(i, j) for i in range(N) for j in range(i + 1, N) if Y[i, j] != 0]
    ne = len(edges)
    dim = N + ne  # [w (squared voltages / vs^2), W_e (products / vs^2)]
    shunt = Y.sum(axis=1)  # conductance to ground at each node

    # injected power at node i:  vs^2 * (shunt_i w_i + sum_e g_e (w_i - W_e))
    inj = np.zeros((N, dim))
    inj[np.arange(N), np.arange(N)] = shunt
    for e, (i, j) in enumerate(edges):
        g = -Y[i, j]
        inj[i, i] += g
        inj[j, j] += g
        inj[i, N + e] -= g
        inj[j, N + e] -= g
    inj *= vs**2

    p_bus = bus_power(matrices)
    A_eq = inj[ns:]
    b_eq = p_bus
    pscale = max(1.0, np.max(np.abs(p_bus)), abs(spec.generation_bounds[1]) if np.isfinite(spec.generation_bounds[1]) else 1.0)
    A_eq, b_eq = A_eq / pscale, b_eq / pscale

    G_rows, h_rows = [], []
    glo, ghi = spec.generation_bounds
    Ps = inj[:ns] / pscale
    G_rows += [Ps, -Ps]
    h_rows += [np.full(ns, ghi / pscale), np.full(ns, -glo / pscale)]
    ulo, uhi = spec.setpoint_bounds
    vlo, vhi = _node_bounds(spec, matrices, floor)
    lo = np.concatenate([np.full(ns, max(ulo, 0.0)), vlo]) / vs
    hi = np.concatenate([np.full(ns, uhi), vhi]) / vs
    Iw = np.zeros((N, dim))
    Iw[np.arange(N), np.arange(N)] = 1.0
    G_rows += [Iw, -Iw]
    h_rows += [hi**2, -(lo**2)]
    G, h = np.vstack(G_rows), np.concatenate(h_rows)
    finite = np.isfinite(h)
    G, h = G[finite], h[finite]

    cones = []
    for e, (i, j) in enumerate(edges):
        F = np.zeros((2, dim))
        F[0, N + e] = 2.0
        F[1, i], F[1, j] = 1.0, -1.0
        ev = np.zeros(dim)
        ev[i] = ev[j] = 1.0
        cones.append((F, np.zeros(2), ev, 0.0))

    c = np.zeros(dim)
    if _objective_kind(spec, objective) == "min_setpoint":
        c[:ns] = 1.0
    else:
        c = spec.cost_vector() @ Ps
    return _Relaxation(SocpProblem(c=c, A_eq=A_eq, b_eq=b_eq, G=G, h=h, cones=cones), ns, nb, vs, edges)


def _feasible(spec, matrices, point: OperatingPoint, floor, tol=BOUND_SLACK) -> tuple[bool, str]:
    vlo, vhi = _node_bounds(spec, matrices, None)
    ulo, uhi = spec.setpoint_bounds
    glo, ghi = spec.generation_bounds

    def rel(x):
        return tol * max(1.0, abs(x))

    if np.any(point.v < vlo - tol * np.maximum(1, np.abs(vlo))) or np.any(point.v > vhi + tol * np.maximum(1, np.abs(vhi))):
        return False, "bus voltage bound"
    if np.any(point.u < ulo - rel(ulo)) or np.any(point.u > uhi + rel(uhi)):
        return False, "setpoint bound"
    if np.any(point.p_s < glo - rel(glo)) or np.any(point.p_s > ghi + rel(ghi)):
        return False, "generation bound"
    if floor is not None and np.any(point.v_load < floor):
        return False, "voltage floor"
    return True, ""


def _objective_value(spec, point: OperatingPoint, objective: str) -> float:
    if _objective_kind(spec, objective) == "min_setpoint":
        return float(np.sum(point.u))
    return float(spec.cost_vector() @ point.p_s)


def _refine(spec, matrices, u0, floor, objective) -> OperatingPoint | None:
    """Reduced-space NLP over the setpoints with the power flow solved inside."""
    ulo, uhi = spec.setpoint_bounds
    vlo, vhi = _node_bounds(spec, matrices, floor)
    glo, ghi = spec.generation_bounds
    cache = {}

    def pf(u):
        key = tuple(np.round(u, 14))
        if key not in cache:
            try:
                cache[key] = power_flow(matrices, u)
            except Exception:
                cache[key] = None
        return cache[key]

    def obj(u):
        pt = pf(u)
        return 1e6 if pt is None else _objective_value(spec, pt, objective)

    def cons(u):
        pt = pf(u)
        if pt is None:
            return -np.ones(2 * len(vlo) + 2 * len(u))
        g = [pt.v - vlo, vhi - pt.v, pt.p_s - glo, ghi - pt.p_s]
        g = np.concatenate(g)
        return g[np.isfinite(g)]

    res = minimize(obj, u0, method="SLSQP", bounds=[(ulo, uhi)] * len(u0),
                   constraints=[{"type": "ineq", "fun": cons}], options={"ftol": 1e-12, "maxiter": 200})
    pt = pf(res.x)
    if pt is None:
        return None
    return pt


def _solve(spec: NetworkSpec, matrices: SystemMatrices, floor, objective: str, tol: conic.Tolerances):
    relax = _build_relaxation(spec, matrices, floor, objective)
    report, sol = conic.solve_socp(relax.problem, tol)
    if not report.ok:
        return None, report
    ns = relax.ns
    w = np.maximum(sol[: ns + relax.nb], 0.0)
    u = relax.vscale * np.sqrt(w[:ns])
    v = relax.vscale * np.sqrt(w[ns:])
    conic_res = power_flow_residual(matrices, u, v)
    status = "exact" if conic_res <= EXACT_TOL else "inexact"
    point = None
    if status == "exact":
        try:
            point = power_flow(matrices, u, v0=v)
        except PowerFlowError:
            status = "inexact"
    if point is None or not _feasible(spec, matrices, point, floor)[0]:
        point = _refine(spec, matrices, u, floor, objective)
        status = "refined" if point is not None else "inexact"
    result = SynthesisResult(
        point=point, objective=float("nan") if point is None else _objective_value(spec, point, objective),
        relaxation=status, verdict=None, conic_residual=conic_res, dual_residual=report.dual_residual,
    )
    return result, report


def solve_opf(spec: NetworkSpec, matrices: SystemMatrices | None = None, objective: str = "cost",
              tol: conic.Tolerances = conic.DEFAULT_TOL) -> SynthesisResult:
    """Plain OPF: minimise generation cost subject to power flow and bounds."""
    M = matrices or build_dynamics(spec)
    result, report = _solve(spec, M, None, objective, tol)
    if result is None:
        raise SynthesisInfeasible("bounds", f"OPF relaxation not solved: {report.status} {report.message}")
    ok, why = _feasible(spec, M, result.point, None) if result.point is not None else (False, "no point")
    if not ok:
        raise SynthesisInfeasible("bounds", f"OPF has no feasible nonlinear point ({why})")
    return result


def solve_synthesis(sspec: SynthesisSpec, cert: Certificate | None = None,
                    tol: conic.Tolerances = conic.DEFAULT_TOL) -> SynthesisResult:
    """OPF with the certified voltage floor on every CPL bus."""
    spec, M = sspec.network, sspec.matrices
    floor = sspec.floor if sspec.floor is not None else (cert.floor if cert is not None else None)
    if floor is None:
        raise ValueError("synthesis needs a voltage floor (certificate)")
    result, report = _solve(spec, M, floor, sspec.objective, tol)
    ok = result is not None and result.point is not None and _feasible(spec, M, result.point, floor)[0]
    if not ok:
        diag, _ = _solve(spec, M, None, sspec.objective, tol)
        if diag is not None and diag.point is not None and _feasible(spec, M, diag.point, None)[0]:
            raise SynthesisInfeasible("floor", "infeasible only because of the certified voltage floor")
        raise SynthesisInfeasible("bounds", "operational bounds are infeasible even without the voltage floor")
    if cert is not None:
        result.verdict = certify_point(cert, result.point.x)
    else:
        result.verdict = bool(np.all(result.point.v_load >= floor))
    return result


def run_pipeline(spec: NetworkSpec, objective: str = "auto", tol: conic.Tolerances = conic.DEFAULT_TOL,
                   h0: np.ndarray | None = None):
    """Steps 1-4: certificate, then synthesis.  Returns ``(certificate, result, timings)``."""
    work = working_model(spec)
    M = build_dynamics(work)
    try:
        cert = certify(work, tol, h0=h0, matrices=M)
    except Exception as exc:
        raise type(exc)(f"steps 1-3 (certification): {exc}") from exc
    t0 = time.perf_counter()
    try:
        result = solve_synthesis(SynthesisSpec(work, M, cert.floor, objective), cert, tol)
    except SynthesisInfeasible as exc:
        raise SynthesisInfeasible(exc.kind, f"step 4 (synthesis): {exc}") from exc
    timings = dict(cert.timings)
    timings["step4_synthesis"] = time.perf_counter() - t0
    result.timings = timings
    if not result.verdict:
        raise RuntimeError("synthesised point fails its own certificate")
    return cert, result, timings
