"""Transient-stability certificates for a prescribed operating box.

Pipeline (steps 1-3 of the design procedure):

1. find the largest scaling ``beta`` of the CPL nonlinearity bound ``h0`` for
   which a common quadratic Lyapunov function exists whose unit sublevel set
   covers the operating box (``codesign_linesearch``);
2. compute the worst load-voltage excursion inside that sublevel set
   (``support_inf``);
3. turn ``sup h <= beta h0`` into a floor on the steady-state load voltages
   (``voltage_floor``).

Any equilibrium whose load voltages clear the floor has the whole operating
box inside its region of attraction (``certify_point``).
"""
from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import conic
from .conic import LmiProblem, Tolerances, block
from .netmodel import NetworkSpec, SystemMatrices, build_dynamics, fingerprint, halfwidth_vector

log = logging.getLogger(__name__)

BETA_START = 1.0
BETA_FACTOR = 1.2
BETA_CAP = 1e6
BETA_FLOOR = 1e-8
LMI_MARGIN = 1e-6
MAX_COVERING_DIM = 20


class CertificationError(RuntimeError):
    """No certificate could be produced (infeasible at every probed beta)."""


class CoveringTooLarge(ValueError):
    pass


class EquilibriumTooClose(ValueError):
    """Load voltage minus the worst excursion is not positive."""


@dataclass(frozen=True)
class OperatingBox:
    halfwidth: np.ndarray

    def __post_init__(self):
        hw = np.asarray(self.halfwidth, dtype=float)
        if hw.ndim != 1 or not np.all(hw > 0):
            raise ValueError("operating box half-widths must be strictly positive")
        object.__setattr__(self, "halfwidth", hw)

    @property
    def n(self) -> int:
        return len(self.halfwidth)

    @property
    def m(self) -> int:
        return 2**self.n

    def vertex(self, k: int = 0) -> np.ndarray:
        signs = np.array([1.0 if (k >> i) & 1 else -1.0 for i in range(self.n)])
        return signs * self.halfwidth

    def vertices(self) -> np.ndarray:
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=self.n)))
        return signs * self.halfwidth

    def around(self, xe: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return xe - self.halfwidth, xe + self.halfwidth


@dataclass(frozen=True)
class LpvStabilitySet:
    h0: np.ndarray
    beta: float
    unbounded: bool = False  # beta hit the cap without losing feasibility

    @property
    def upper(self) -> np.ndarray:
        return self.beta * self.h0

    @property
    def active(self) -> np.ndarray:
        return self.h0 > 0


@dataclass(frozen=True)
class SublevelSet:
    P: np.ndarray
    gamma: np.ndarray
    tau: float
    D: np.ndarray

    @property
    def P_hat(self) -> np.ndarray:
        return self.P @ np.linalg.inv(self.D)

    def value(self, dx: np.ndarray) -> np.ndarray:
        dx = np.atleast_2d(dx)
        return np.einsum("ij,jk,ik->i", dx, self.P, dx)


@dataclass
class Certificate:
    matrices: SystemMatrices
    box: OperatingBox
    lpv: LpvStabilitySet
    sublevel: SublevelSet
    dx_inf: np.ndarray
    floor: np.ndarray
    network_hash: str = ""
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "network_hash": self.network_hash,
            "beta": self.lpv.beta,
            "beta_unbounded": self.lpv.unbounded,
            "h0": self.lpv.h0.tolist(),
            "P": self.sublevel.P.tolist(),
            "gamma": self.sublevel.gamma.tolist(),
            "tau": self.sublevel.tau,
            "halfwidth": self.box.halfwidth.tolist(),
            "dx_inf": self.dx_inf.tolist(),
            "voltage_floor": self.floor.tolist(),
            "load_states": [self.matrices.layout.labels[i] for i in self.matrices.layout.load_idx],
            "timings": dict(self.timings),
        }

    @classmethod
    def from_dict(cls, doc: dict, matrices: SystemMatrices) -> "Certificate":
        D = matrices.D
        return cls(
            matrices=matrices,
            box=OperatingBox(np.array(doc["halfwidth"])),
            lpv=LpvStabilitySet(np.array(doc["h0"]), float(doc["beta"]), bool(doc.get("beta_unbounded", False))),
            sublevel=SublevelSet(np.array(doc["P"]), np.array(doc["gamma"]), float(doc["tau"]), D),
            dx_inf=np.array(doc["dx_inf"]),
            floor=np.array(doc["voltage_floor"]),
            network_hash=doc.get("network_hash", ""),
            timings=dict(doc.get("timings", {})),
        )


# ---------------------------------------------------------------------------
# shifted dynamics


@dataclass(frozen=True)
class ShiftedDynamics:
    """Residual dynamics around ``xe``: ``D d(dx)/dt = A dx + B1 [h] C1 dx``."""

    matrices: SystemMatrices
    xe: np.ndarray
    p_load: np.ndarray

    def h(self, dx: np.ndarray) -> np.ndarray:
        C1 = self.matrices.C1
        ve = C1 @ self.xe
        return -self.p_load / ((ve + C1 @ dx) * ve)

    def field(self, dx: np.ndarray) -> np.ndarray:
        M = self.matrices
        force = M.A @ dx + M.B1 @ (self.h(dx) * (M.C1 @ dx))
        return force / np.diag(M.D)

    def system_matrix(self, h: np.ndarray) -> np.ndarray:
        M = self.matrices
        return np.linalg.solve(M.D, M.A + M.B1 @ np.diag(h) @ M.C1)


def shift_coordinates(matrices: SystemMatrices, xe: np.ndarray, p_load: np.ndarray | None = None) -> ShiftedDynamics:
    xe = np.asarray(xe, dtype=float)
    p = matrices.cpl_power if p_load is None else np.asarray(p_load, dtype=float)
    if np.any(matrices.C1 @ xe <= 0):
        raise ValueError("equilibrium load voltages must be positive")
    return ShiftedDynamics(matrices, xe, p)


# ---------------------------------------------------------------------------
# LMI assembly


@dataclass(frozen=True)
class _Scaled:
    """LMI data in box-normalised coordinates ``dx = T z`` with ``T = diag(halfwidth)``."""

    Az: np.ndarray
    Bz: np.ndarray
    Cz: np.ndarray
    h0: np.ndarray
    s: float
    T: np.ndarray


def _scaled(matrices: SystemMatrices, h0: np.ndarray, halfwidth: np.ndarray | None) -> _Scaled:
    n = matrices.n
    t = np.ones(n) if halfwidth is None else np.asarray(halfwidth, dtype=float)
    d = np.diag(matrices.D)
    active = h0 > 0
    Az = (matrices.A / d[:, None]) * t[None, :] / t[:, None]
    Bz = matrices.B1[:, active] / d[:, None] / t[:, None]
    Cz = matrices.C1[active] * t[None, :]
    s = 1.0 / np.linalg.norm(Az, 2)
    return _Scaled(Az, Bz, Cz, h0[active], s, t)


def _stability_block(sc: _Scaled, beta: float):
    """Affine map ``(Pz, tau) -> S-procedure LMI`` (required negative semidefinite)."""
    n, k = sc.Az.shape[0], len(sc.h0)
    Hc = sc.Cz.T * sc.h0[None, :]  # Cz' [h0]

    def lmi(v):
        Pz, tau = v["P"], v["tau"][0]
        top = sc.s * (Pz @ sc.Az + sc.Az.T @ Pz + Pz)
        if k == 0:
            return top + LMI_MARGIN * np.eye(n)
        off = sc.s * (Pz @ sc.Bz) + 0.5 * beta * tau * Hc
        return block([[top, off], [off.T, -tau * np.eye(k)]]) + LMI_MARGIN * np.eye(n + k)

    return lmi


def assemble_stability_lmi(matrices: SystemMatrices, beta: float, h0: np.ndarray,
                           halfwidth: np.ndarray | None = None) -> LmiProblem:
    """Feasibility LMI in ``(P, tau)`` for the LPV family ``h in [0, beta h0]``.

    Variables are in box-normalised coordinates and ``P`` is normalised to unit
    trace (the constraint is homogeneous in ``(P, tau)``).
    """
    h0 = np.asarray(h0, dtype=float)
    if beta <= 0 or np.any(h0 < 0):
        raise ValueError("beta must be positive and h0 non-negative")
    if h0.shape != (matrices.n_l,):
        raise ValueError(f"h0 must have {matrices.n_l} entries")
    sc = _scaled(matrices, h0, halfwidth)
    n = matrices.n
    return LmiProblem(
        symmetric={"P": n},
        vectors={"tau": 1},
        psd=[("P >= 0", lambda v: v["P"])],
        nsd=[("stability", _stability_block(sc, beta))],
        nonneg=[("tau >= 0", lambda v: v["tau"])],
        eq=[("trace P = 1", lambda v: _trace(v["P"]) - 1.0)],
    )


def _trace(P):
    import cvxpy as cp

    return cp.trace(P) if isinstance(P, cp.Expression) else np.trace(P)


def codesign_problem(matrices: SystemMatrices, beta: float, h0: np.ndarray, box: OperatingBox,
                     objective: bool = True) -> LmiProblem:
    """Co-design LMI: stability block, ``P <= diag(gamma)``, ``sum gamma dx^2 <= 1``."""
    h0 = np.asarray(h0, dtype=float)
    sc = _scaled(matrices, h0, box.halfwidth)
    n = matrices.n

    def diag(g):
        import cvxpy as cp

        return cp.diag(g) if isinstance(g, cp.Expression) else np.diag(g)

    return LmiProblem(
        symmetric={"P": n},
        vectors={"gamma": n, "tau": 1},
        psd=[("P >= 0", lambda v: v["P"])],
        nsd=[
            ("stability", _stability_block(sc, beta)),
            ("P <= diag(gamma)", lambda v: v["P"] - diag(v["gamma"])),
        ],
        nonneg=[
            ("vertex covering", lambda v: 1.0 - _sum(v["gamma"])),
            ("gamma >= 0", lambda v: v["gamma"]),
            ("tau >= 0", lambda v: v["tau"]),
        ],
        maximize_logdet="P" if objective else None,
    )


def _sum(g):
    import cvxpy as cp

    return cp.sum(g) if isinstance(g, cp.Expression) else float(np.sum(g))


def _unscale(matrices, values: dict, h0: np.ndarray, hw: np.ndarray) -> SublevelSet:
    sc = _scaled(matrices, h0, hw)
    Ti = 1.0 / hw
    P = values["P"] * Ti[:, None] * Ti[None, :]
    gamma = values["gamma"] * Ti**2 if "gamma" in values else np.diag(P).copy()
    tau = float(values["tau"][0]) / sc.s
    return SublevelSet(0.5 * (P + P.T), gamma, tau, matrices.D)


# ---------------------------------------------------------------------------
# beta searches


@dataclass
class SearchTrace:
    probes: list[tuple[float, bool, float]] = field(default_factory=list)  # (beta, feasible, seconds)
    final_seconds: float = 0.0  # the max-log-det solve at the chosen beta

    @property
    def mean_step_seconds(self) -> float:
        return float(np.mean([p[2] for p in self.probes])) if self.probes else 0.0

    @property
    def max_step_seconds(self) -> float:
        return float(max(p[2] for p in self.probes)) if self.probes else 0.0


def _search(feasible, tol: float, trace: SearchTrace):
    """Geometric line search from BETA_START then bisection once bracketed.

    Returns ``(beta, payload, unbounded)``.
    """
    def probe(beta):
        t0 = time.perf_counter()
        ok, payload = feasible(beta)
        trace.probes.append((beta, ok, time.perf_counter() - t0))
        return ok, payload

    beta = BETA_START
    ok, payload = probe(beta)
    if ok:
        lo, lo_payload = beta, payload
        while True:
            nxt = beta * BETA_FACTOR
            if nxt > BETA_CAP:
                return lo, lo_payload, True
            ok, payload = probe(nxt)
            if not ok:
                hi = nxt
                break
            beta, lo, lo_payload = nxt, nxt, payload
    else:
        hi = beta
        while True:
            beta = beta / BETA_FACTOR
            if beta < BETA_FLOOR:
                raise CertificationError("stability LMI infeasible at every probed beta")
            ok, payload = probe(beta)
            if ok:
                lo, lo_payload = beta, payload
                break
            hi = beta
    while hi / lo - 1.0 > tol:
        mid = np.sqrt(lo * hi)
        ok, payload = probe(mid)
        if ok:
            lo, lo_payload = mid, payload
        else:
            hi = mid
    return lo, lo_payload, False


def gevp_bisection(matrices: SystemMatrices, h0: np.ndarray, tol: Tolerances = conic.DEFAULT_TOL,
                   halfwidth: np.ndarray | None = None):
    """Largest ``beta`` with a feasible stability LMI; returns ``(beta, P, unbounded)``."""
    h0 = np.asarray(h0, dtype=float)
    hw = np.ones(matrices.n) if halfwidth is None else np.asarray(halfwidth, dtype=float)
    if not np.any(h0 > 0):
        return _no_cpl_gevp(matrices, h0, tol, hw)

    def feasible(beta):
        report, values = conic.solve_lmi(assemble_stability_lmi(matrices, beta, h0, hw), tol)
        return report.ok, values

    beta, values, unbounded = _search(feasible, tol.bisection, SearchTrace())
    P = _unscale(matrices, values, h0, hw).P
    return beta, P / np.trace(P), unbounded


def _no_cpl_gevp(matrices, h0, tol, hw):
    report, values = conic.solve_lmi(assemble_stability_lmi(matrices, 1.0, h0, hw), tol)
    if not report.ok:
        raise CertificationError("linear network does not admit the decay-rate Lyapunov inequality")
    P = _unscale(matrices, values, h0, hw).P
    return BETA_CAP, P / np.trace(P), True


def codesign_linesearch(matrices: SystemMatrices, box: OperatingBox, h0: np.ndarray,
                        tol: Tolerances = conic.DEFAULT_TOL, trace: SearchTrace | None = None):
    """Largest feasible ``beta`` of the co-design problem and its max-log-det set.

    Returns ``(LpvStabilitySet, SublevelSet)``.
    """
    h0 = np.asarray(h0, dtype=float)
    trace = trace if trace is not None else SearchTrace()

    def feasible(beta):
        report, values = conic.solve_lmi(codesign_problem(matrices, beta, h0, box, objective=False), tol)
        return report.ok, values

    if np.any(h0 > 0):
        beta, _, unbounded = _search(feasible, tol.bisection, trace)
    else:
        beta, unbounded = BETA_CAP, True
    # max-log-det at the chosen beta; back off inside the bracket if the solver struggles
    t0 = time.perf_counter()
    for attempt in range(8):
        report, values = conic.solve_maxlogdet(codesign_problem(matrices, beta, h0, box), tol)
        if report.ok:
            break
        log.info("max-log-det failed at beta=%.6g (%s); backing off", beta, report.message or report.solver_status)
        beta *= 1.0 - tol.bisection
    else:
        raise CertificationError(f"co-design max-log-det failed near beta={beta:.6g}")
    trace.final_seconds = time.perf_counter() - t0
    sub = _unscale(matrices, values, h0, box.halfwidth)
    return LpvStabilitySet(h0, beta, unbounded), sub


# ---------------------------------------------------------------------------
# closed-form pieces


def set_covering(P: np.ndarray, box: OperatingBox, chunk: int = 1 << 16) -> float:
    """Smallest ``alpha`` with the box inside ``{dx: dx' P dx <= alpha}``: max over vertices."""
    n = box.n
    if n > MAX_COVERING_DIM:
        raise CoveringTooLarge(f"2**{n} vertices is too many; use the diagonal-gamma co-design path")
    P = np.asarray(P, dtype=float)
    best = -np.inf
    # vertex k has sign bit i = (k >> i) & 1
    for start in range(0, 2**n, chunk):
        ks = np.arange(start, min(start + chunk, 2**n))
        signs = ((ks[:, None] >> np.arange(n)[None, :]) & 1) * 2.0 - 1.0
        V = signs * box.halfwidth
        best = max(best, float(np.max(np.einsum("ij,jk,ik->i", V, P, V))))
    return best


def support_inf(P: np.ndarray, C1: np.ndarray) -> np.ndarray:
    """``inf`` of each row of ``C1 dx`` over the ellipsoid ``dx' P dx <= 1``."""
    L = np.linalg.cholesky(np.asarray(P, dtype=float))
    W = np.linalg.solve(L, np.asarray(C1, dtype=float).T)  # L^{-1} C1^T
    return -np.sqrt(np.sum(W * W, axis=0))


def voltage_floor(dx_inf: np.ndarray, p_load: np.ndarray, beta: float, h0: np.ndarray) -> np.ndarray:
    """Smallest steady-state load voltage keeping ``sup h <= beta h0``.

    Positive root of ``v**2 + dx_inf v + p/(beta h0) = 0``; for zero-power
    loads it degenerates to ``-dx_inf`` (positivity over the sublevel set).
    """
    d = np.asarray(dx_inf, dtype=float)
    p = np.asarray(p_load, dtype=float)
    bh = beta * np.asarray(h0, dtype=float)
    if np.any(p > 0):
        raise ValueError("CPL power must be non-positive")
    ratio = np.divide(p, bh, out=np.zeros_like(p), where=bh > 0)
    if np.any((p < 0) & ~(bh > 0)):
        raise ValueError("beta * h0 must be positive wherever the CPL power is nonzero")
    return 0.5 * (-d + np.sqrt(d * d - 4.0 * ratio))


def sup_h(v_load: np.ndarray, dx_inf: np.ndarray, p_load: np.ndarray) -> np.ndarray:
    """Worst-case ``h`` over the sublevel set for load voltages ``v_load``."""
    v = np.asarray(v_load, dtype=float)
    low = v + np.asarray(dx_inf, dtype=float)
    if np.any(low <= 0):
        raise EquilibriumTooClose("equilibrium too close to ellipsoid boundary: v + dx_inf <= 0")
    return -np.asarray(p_load, dtype=float) / (low * v)


def certify_point(cert: Certificate, xe: np.ndarray) -> bool:
    return bool(np.all(cert.matrices.C1 @ np.asarray(xe, dtype=float) >= cert.floor))


def sampled_lmi_max_eig(matrices: SystemMatrices, P: np.ndarray, beta: float, h0: np.ndarray,
                   samples: int = 100, rng: np.random.Generator | None = None) -> float:
    """Largest eigenvalue of ``P D^-1 (A + B1[h]C1) + (.)' + P`` over sampled ``h``."""
    rng = rng or np.random.default_rng(0)
    Dinv = np.diag(1.0 / np.diag(matrices.D))
    upper = beta * np.asarray(h0, dtype=float)
    hs = rng.uniform(0.0, 1.0, size=(samples, len(upper))) * upper
    hs = np.vstack([hs, np.zeros_like(upper), upper])
    worst = -np.inf
    for h in hs:
        M = P @ Dinv @ (matrices.A + matrices.B1 @ np.diag(h) @ matrices.C1)
        worst = max(worst, float(np.linalg.eigvalsh(M + M.T + P).max()))
    return worst


# ---------------------------------------------------------------------------
# steps 1-3


def initial_h_guess(spec: NetworkSpec, matrices: SystemMatrices, halfwidth: np.ndarray) -> np.ndarray:
    """``-p / v_min**2`` with ``v_min`` the lowest voltage reachable inside the box."""
    nominal = 1.0 if spec.normalized else spec.base_voltage
    loads = [b for b in spec.buses if b.has_cpl]
    h0 = np.zeros(len(loads))
    for k, (bus, idx) in enumerate(zip(loads, matrices.layout.load_idx)):
        vmin = spec.bus_voltage_bounds(bus)[0] - halfwidth[idx]
        vmin = max(vmin, 0.1 * nominal)
        h0[k] = -bus.cpl_power / vmin**2
    return h0


def certify(spec: NetworkSpec, tol: Tolerances = conic.DEFAULT_TOL, h0: np.ndarray | None = None,
            matrices: SystemMatrices | None = None) -> Certificate:
    """Run steps 1-3 for ``spec`` (already in the units it should be certified in)."""
    M = matrices or build_dynamics(spec)
    box = OperatingBox(halfwidth_vector(spec))
    if h0 is None:
        h0 = initial_h_guess(spec, M, box.halfwidth)
    timings = {}
    trace = SearchTrace()
    t0 = time.perf_counter()
    lpv, sub = codesign_linesearch(M, box, h0, tol, trace)
    timings["step1_linesearch"] = time.perf_counter() - t0
    timings["step1_mean_probe"] = trace.mean_step_seconds
    timings["step1_max_probe"] = trace.max_step_seconds
    timings["step1_probes"] = len(trace.probes)
    timings["step1_maxlogdet"] = trace.final_seconds
    t0 = time.perf_counter()
    dx_inf = support_inf(sub.P, M.C1)
    timings["step2_support"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    floor = voltage_floor(dx_inf, M.cpl_power, lpv.beta, lpv.h0)
    timings["step3_floor"] = time.perf_counter() - t0
    return Certificate(M, box, lpv, sub, dx_inf, floor, fingerprint(spec), timings)
