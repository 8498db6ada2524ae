"""Time-domain simulation of the nonlinear microgrid model.

Everything here works on batches: a set of initial conditions is stacked into
one ODE so that vertex sweeps and ROA grids cost one integrator run per chunk
instead of one per start point.  A trajectory whose load voltage reaches the
divergence floor is frozen in place (its derivative is set to zero), so later
samples still show it below the floor and it cannot be misread as converged.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.integrate import solve_ivp

from .netmodel import NetworkSpec, SystemMatrices
from .steadystate import PowerFlowError, power_flow

log = logging.getLogger(__name__)

CONVERGED = "converged"
DIVERGED = "diverged"
UNDECIDED = "undecided"


class SimulationError(RuntimeError):
    """The integrator failed (for example step-size underflow)."""


class BorderlineError(RuntimeError):
    """No feasible input inside the search bracket."""


@dataclass(frozen=True)
class SimOptions:
    integrator: str = "adaptive"  # "adaptive" (embedded RK45) or "rk4"
    rtol: float = 1e-8
    atol: float = 1e-10  # relative to the per-unit state scale
    step: float = 2e-6  # rk4 step, seconds
    t_max: float = 0.5
    eps: float = 1e-3  # per-unit convergence radius
    v_div: float = 1.0  # volts
    hold_fraction: float = 0.05
    samples: int = 1001
    chunk: int = 4096

    def __post_init__(self):
        if self.integrator not in ("adaptive", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if not (self.t_max > 0 and self.eps > 0 and self.v_div > 0):
            raise ValueError("t_max, eps and v_div must be positive")
        if self.step <= 0 or self.samples < 2 or self.chunk < 1:
            raise ValueError("step, samples and chunk must be positive")


@dataclass(frozen=True)
class Units:
    """How one per-unit and one volt look in the working units of the model."""

    x_scale: np.ndarray
    volt: float = 1.0

    @classmethod
    def of(cls, spec: NetworkSpec | None, matrices: SystemMatrices) -> "Units":
        n = matrices.n
        if spec is None:
            return cls(np.ones(n), 1.0)
        if spec.normalized:
            return cls(np.ones(n), 1.0 / spec.base_voltage)
        scale = np.full(n, spec.current_base)
        scale[matrices.layout.voltage_idx] = spec.base_voltage
        return cls(scale, 1.0)


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray  # samples x states
    classification: str
    final_distance: float  # per-unit infinity norm
    min_load_voltage: float

    @property
    def converged(self) -> bool:
        return self.classification == CONVERGED

    def to_csv(self, path: str | Path, labels: Iterable[str] | None = None) -> None:
        labels = list(labels) if labels is not None else [f"x{k}" for k in range(self.x.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *labels])
            for tk, xk in zip(self.t, self.x):
                w.writerow([repr(float(tk)), *(repr(float(v)) for v in xk)])

    def summary(self) -> dict:
        return {
            "classification": self.classification,
            "final_distance": self.final_distance,
            "min_load_voltage": self.min_load_voltage,
            "samples": int(len(self.t)),
        }


# ---------------------------------------------------------------------------
# integration


def _batch_field(matrices: SystemMatrices, u: np.ndarray, p: np.ndarray, v_floor: float):
    Dinv = 1.0 / np.diag(matrices.D)
    A = matrices.A
    drive = matrices.B2 @ (matrices.input_gain * u)
    load = matrices.layout.load_idx
    guarded = p != 0

    def f(X):
        # X is states x batch
        vl = X[load]
        dead = np.any(vl[guarded] <= v_floor, axis=0)
        safe = np.where(vl > v_floor, vl, v_floor)
        F = A @ X + drive[:, None]
        if len(load):
            F += matrices.B1 @ (p[:, None] / safe)
        F *= Dinv[:, None]
        F[:, dead] = 0.0
        return F

    return f


def _integrate(f: Callable, X0: np.ndarray, opts: SimOptions, atol: np.ndarray):
    n, m = X0.shape
    t_eval = np.linspace(0.0, opts.t_max, opts.samples)
    if opts.integrator == "rk4":
        return t_eval, _rk4(f, X0, t_eval, opts.step)
    sol = solve_ivp(lambda t, y: f(y.reshape(n, m)).ravel(), (0.0, opts.t_max), X0.ravel(),
                    method="RK45", t_eval=t_eval, rtol=opts.rtol, atol=np.repeat(atol, m))
    if sol.status != 0:
        raise SimulationError(f"integrator failed: {sol.message}")
    return sol.t, sol.y.reshape(n, m, -1)


def _rk4(f: Callable, X0: np.ndarray, t_eval: np.ndarray, step: float) -> np.ndarray:
    out = np.empty(X0.shape + (len(t_eval),))
    X = X0.copy()
    out[..., 0] = X
    t = 0.0
    for k in range(1, len(t_eval)):
        span = t_eval[k] - t
        nsub = max(1, int(np.ceil(span / step - 1e-9)))
        h = span / nsub
        for _ in range(nsub):
            k1 = f(X)
            k2 = f(X + 0.5 * h * k1)
            k3 = f(X + 0.5 * h * k2)
            k4 = f(X + h * k3)
            X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(X)):
            raise SimulationError("fixed-step integration produced non-finite states")
        t = t_eval[k]
        out[..., k] = X
    return out


def _classify(t, Y, xe, load, units: Units, opts: SimOptions):
    """Y is states x samples for one trajectory."""
    dist = np.max(np.abs(Y - xe[:, None]) / units.x_scale[:, None], axis=0)
    vmin = float(np.min(Y[load])) if len(load) else float("inf")
    if len(load) and vmin <= opts.v_div * units.volt:
        return DIVERGED, float(dist[-1]), vmin
    hold = opts.hold_fraction * opts.t_max - 1e-12
    t_in = None
    for tk, inside in zip(t, dist <= opts.eps):
        if not inside:
            t_in = None
        elif t_in is None:
            t_in = tk
        if t_in is not None and tk - t_in >= hold:
            return CONVERGED, float(dist[-1]), vmin
    return UNDECIDED, float(dist[-1]), vmin


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


class _Tracker:
    """Per-column bookkeeping of the convergence/divergence verdict."""

    def __init__(self, X0, xe, load, units: Units, opts: SimOptions):
        m = X0.shape[1]
        self.xe, self.load, self.units, self.opts = xe, load, units, opts
        self.hold = opts.hold_fraction * opts.t_max - 1e-12
        self.t_in = np.full(m, np.nan)
        self.vmin = np.full(m, np.inf)
        self.verdict = np.full(m, UNDECIDED, dtype=object)
        self.last = X0.copy()
        self.active = np.ones(m, bool)
        self.observe(np.arange(m), np.zeros(m), X0)

    def observe(self, cols, t, X):
        """Record accepted states ``X`` (states x len(cols)) at times ``t``."""
        self.last[:, cols] = X
        dist = np.max(np.abs(X - self.xe[:, None]) / self.units.x_scale[:, None], axis=0)
        if len(self.load):
            self.vmin[cols] = np.minimum(self.vmin[cols], X[self.load].min(axis=0))
        dead = self.vmin[cols] <= self.opts.v_div * self.units.volt
        inside = dist <= self.opts.eps
        t_in = self.t_in[cols]
        t_in = np.where(inside, np.where(np.isnan(t_in), t, t_in), np.nan)
        self.t_in[cols] = t_in
        done = inside & (t - t_in >= self.hold)
        self.verdict[cols[dead]] = DIVERGED
        self.verdict[cols[done & ~dead]] = CONVERGED
        self.active[cols[dead | done]] = False

    def trajectories(self) -> list[Trajectory]:
        dist = np.max(np.abs(self.last - self.xe[:, None]) / self.units.x_scale[:, None], axis=0)
        return [Trajectory(np.array([np.nan]), self.last[:, j][None, :].copy(), self.verdict[j],
                           float(dist[j]), float(self.vmin[j])) for j in range(self.last.shape[1])]


def _sweep_dp(f, X0, tracker: _Tracker, opts: SimOptions, atol: np.ndarray):
    """Adaptive Dormand-Prince with an independent step size per column."""
    n, m = X0.shape
    X = X0.copy()
    t = np.zeros(m)
    h = np.full(m, 1e-6 * opts.t_max)
    K = np.empty((7, n, m))
    K[0] = f(X)
    atol = atol[:, None]
    for _ in range(10_000_000):
        cols = np.nonzero(tracker.active & (t < opts.t_max))[0]
        if len(cols) == 0:
            return
        hc = np.minimum(h[cols], opts.t_max - t[cols])
        Xc = X[:, cols]
        Kc = np.empty((7, n, len(cols)))
        Kc[0] = K[0][:, cols]
        for s in range(1, 6):
            Kc[s] = f(Xc + hc * np.tensordot(_DP_A[s], Kc[:s], axes=1))
        Xn = Xc + hc * np.tensordot(_DP_B, Kc[:6], axes=1)
        Kc[6] = f(Xn)
        err = hc * np.tensordot(_DP_E, Kc, axes=1)
        scale = atol + opts.rtol * np.maximum(np.abs(Xc), np.abs(Xn))
        enorm = np.sqrt(np.mean((err / scale) ** 2, axis=0))
        ok = enorm <= 1.0
        with np.errstate(divide="ignore"):
            fac = np.where(enorm == 0, 10.0, 0.9 * enorm ** -0.2)
        fac = np.clip(fac, 0.2, 10.0)
        fac = np.where(ok, fac, np.minimum(fac, 1.0))
        h[cols] = hc * fac
        if np.any(h[cols] < 1e-14 * opts.t_max):
            raise SimulationError("step size underflow in the batched integrator")
        acc = cols[ok]
        if len(acc):
            t[acc] += hc[ok]
            X[:, acc] = Xn[:, ok]
            K[0][:, acc] = Kc[6][:, ok]
            if not np.all(np.isfinite(Xn[:, ok])):
                raise SimulationError("batched integration produced non-finite states")
            tracker.observe(acc, t[acc], Xn[:, ok])
    raise SimulationError("batched integrator exceeded its iteration budget")


def _sweep_rk4(f, X0, tracker: _Tracker, opts: SimOptions):
    X = X0.copy()
    nsteps = int(np.ceil(opts.t_max / opts.step - 1e-9))
    h = opts.t_max / nsteps
    for k in range(1, nsteps + 1):
        cols = np.nonzero(tracker.active)[0]
        if len(cols) == 0:
            return
        Xc = X[:, cols]
        k1 = f(Xc)
        k2 = f(Xc + 0.5 * h * k1)
        k3 = f(Xc + 0.5 * h * k2)
        k4 = f(Xc + h * k3)
        Xc = Xc + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(Xc)):
            raise SimulationError("fixed-step integration produced non-finite states")
        X[:, cols] = Xc
        tracker.observe(cols, np.full(len(cols), k * h), Xc)


def simulate_many(matrices: SystemMatrices, u, x0s: np.ndarray, xe: np.ndarray,
                  opts: SimOptions = SimOptions(), p_load: np.ndarray | None = None,
                  units: Units | None = None, keep: bool = True) -> list[Trajectory]:
    """Integrate from every row of ``x0s`` and classify against ``xe``.

    With ``keep=True`` full sampled trajectories are returned.  With
    ``keep=False`` each column gets its own step size, integration stops as
    soon as the verdict is known, and only the last state is kept; this is
    the fast path for vertex sweeps and ROA grids.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    xe = np.asarray(xe, dtype=float)
    units = units or Units(np.ones(matrices.n))
    p = matrices.cpl_power if p_load is None else np.asarray(p_load, dtype=float)
    # only loads that draw power have the 1/v singularity the floor guards against
    load = matrices.layout.load_idx[p != 0]
    if len(load) and np.any(x0s[:, load] <= 0):
        raise ValueError("initial load voltages must be positive")
    f = _batch_field(matrices, u, p, opts.v_div * units.volt)
    atol = opts.atol * units.x_scale
    out: list[Trajectory] = []
    for start in range(0, len(x0s), opts.chunk):
        block = x0s[start:start + opts.chunk].T.copy()
        if keep:
            t, Y = _integrate(f, block, opts, atol)
            for j in range(block.shape[1]):
                cls, dist, vmin = _classify(t, Y[:, j, :], xe, load, units, opts)
                out.append(Trajectory(t, Y[:, j, :].T.copy(), cls, dist, vmin))
        else:
            tracker = _Tracker(block, xe, load, units, opts)
            if opts.integrator == "rk4":
                _sweep_rk4(f, block, tracker, opts)
            else:
                _sweep_dp(f, block, tracker, opts, atol)
            out.extend(tracker.trajectories())
    return out


def simulate(matrices: SystemMatrices, u, x0: np.ndarray, xe: np.ndarray,
             opts: SimOptions = SimOptions(), p_load: np.ndarray | None = None,
             units: Units | None = None) -> Trajectory:
    return simulate_many(matrices, u, np.asarray(x0)[None, :], xe, opts, p_load, units)[0]


def box_vertices(xe: np.ndarray, halfwidth: np.ndarray) -> np.ndarray:
    n = len(xe)
    signs = ((np.arange(2**n)[:, None] >> np.arange(n)) & 1) * 2 - 1
    return xe + signs * halfwidth


def sweep_starts(matrices: SystemMatrices, u, starts: np.ndarray, xe: np.ndarray,
                 opts: SimOptions = SimOptions(), units: Units | None = None,
                 extend: int = 3) -> list[Trajectory]:
    """Classify many starts on the fast path.

    Lightly damped networks can still be ringing when the horizon ends.  Runs
    left undecided are repeated with a doubled horizon, at most ``extend``
    times; diverged runs are never retried.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    trajs = simulate_many(matrices, u, starts, xe, opts, units=units, keep=False)
    for _ in range(extend):
        todo = [k for k, tr in enumerate(trajs) if tr.classification == UNDECIDED]
        if not todo:
            break
        opts = replace(opts, t_max=2.0 * opts.t_max)
        for k, tr in zip(todo, simulate_many(matrices, u, starts[todo], xe, opts, units=units, keep=False)):
            trajs[k] = tr
    return trajs


def vertex_sweep(matrices: SystemMatrices, u, xe: np.ndarray, halfwidth: np.ndarray,
                 opts: SimOptions = SimOptions(), units: Units | None = None,
                 max_dim: int = 14, extend: int = 3) -> list[Trajectory]:
    """Simulate from all box vertices (the count doubles per state, hence ``max_dim``)."""
    if len(xe) > max_dim:
        raise ValueError(f"{2**len(xe)} vertices exceed the sweep limit (n <= {max_dim})")
    return sweep_starts(matrices, u, box_vertices(xe, halfwidth), xe, opts, units, extend)


def lyapunov_trace(traj: Trajectory, P: np.ndarray, xe: np.ndarray) -> tuple[np.ndarray, float]:
    """``V(t)`` along the trajectory and the largest normalized forward difference."""
    dx = traj.x - xe
    V = np.einsum("ki,ij,kj->k", dx, P, dx)
    if len(V) < 2:
        return V, 0.0
    scale = V[0] if V[0] > 0 else 1.0
    return V, float(np.max(np.diff(V)) / scale)


# ---------------------------------------------------------------------------
# two-state studies


def _single_source_equilibrium(matrices: SystemMatrices, u: float) -> np.ndarray:
    return power_flow(matrices, np.array([u])).x


@dataclass
class RoaMap:
    axes: tuple[np.ndarray, np.ndarray]
    converged: np.ndarray  # bool grid, shape (len(axes[1]), len(axes[0]))
    boundary: np.ndarray  # k x 2 polyline of boundary points, ordered by angle
    xe: np.ndarray
    u: float

    def contains_box(self, halfwidth: np.ndarray) -> bool:
        """True when every grid point inside the box converged."""
        gx, gy = np.meshgrid(*self.axes)
        inside = (np.abs(gx - self.xe[0]) <= halfwidth[0]) & (np.abs(gy - self.xe[1]) <= halfwidth[1])
        return bool(np.all(self.converged[inside]))

    def to_csv(self, path: str | Path, labels=("x0", "x1")) -> None:
        gx, gy = np.meshgrid(*self.axes)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*labels, "converged"])
            for a, b, c in zip(gx.ravel(), gy.ravel(), self.converged.ravel()):
                w.writerow([repr(float(a)), repr(float(b)), int(c)])

    def summary(self) -> dict:
        return {
            "u": self.u,
            "equilibrium": self.xe.tolist(),
            "grid": [len(self.axes[0]), len(self.axes[1])],
            "converged": int(self.converged.sum()),
            "not_converged": int((~self.converged).sum()),
            "boundary": self.boundary.tolist(),
        }


def roa_grid_2d(matrices: SystemMatrices, u: float, window: np.ndarray, points: int = 301,
                opts: SimOptions = SimOptions(samples=201), units: Units | None = None,
                refine: int = 6) -> RoaMap:
    """Classify a grid of starts around the equilibrium.

    ``window`` is the half-width of the grid in each state.  Points with a
    non-positive load voltage are marked not converged without simulating.
    Boundary points are located by bisecting every grid edge whose two ends
    disagree (``refine`` halvings).
    """
    if matrices.n != 2:
        raise ValueError("the 2-D ROA map needs a two-state model")
    xe = _single_source_equilibrium(matrices, u)
    window = np.asarray(window, dtype=float)
    axes = tuple(np.linspace(xe[k] - window[k], xe[k] + window[k], points) for k in range(2))
    gx, gy = np.meshgrid(*axes)
    starts = np.column_stack([gx.ravel(), gy.ravel()])
    ok = _converges(matrices, u, starts, xe, opts, units)
    grid = ok.reshape(gx.shape)
    boundary = _boundary(matrices, u, axes, grid, xe, opts, units, refine)
    return RoaMap(axes, grid, boundary, xe, float(u))


def _guarded(matrices: SystemMatrices) -> np.ndarray:
    return matrices.layout.load_idx[matrices.cpl_power != 0]


def _converges(matrices, u, starts, xe, opts, units) -> np.ndarray:
    load = _guarded(matrices)
    valid = np.all(starts[:, load] > opts.v_div * (units.volt if units else 1.0), axis=1)
    ok = np.zeros(len(starts), bool)
    if np.any(valid):
        trajs = simulate_many(matrices, u, starts[valid], xe, opts, units=units, keep=False)
        ok[valid] = [tr.converged for tr in trajs]
    return ok


def _boundary(matrices, u, axes, grid, xe, opts, units, refine) -> np.ndarray:
    pairs = []
    ny, nx = grid.shape
    for j in range(ny):
        for i in range(nx):
            for dj, di in ((0, 1), (1, 0)):
                jj, ii = j + dj, i + di
                if jj < ny and ii < nx and grid[j, i] != grid[jj, ii]:
                    a = np.array([axes[0][i], axes[1][j]])
                    b = np.array([axes[0][ii], axes[1][jj]])
                    pairs.append((a, b) if grid[j, i] else (b, a))
    if not pairs:
        return np.zeros((0, 2))
    good = np.array([p[0] for p in pairs])
    bad = np.array([p[1] for p in pairs])
    for _ in range(refine):
        mid = 0.5 * (good + bad)
        ok = _converges(matrices, u, mid, xe, opts, units)
        good[ok] = mid[ok]
        bad[~ok] = mid[~ok]
    pts = 0.5 * (good + bad)
    span = np.array([axes[0][-1] - axes[0][0], axes[1][-1] - axes[1][0]])
    ang = np.arctan2((pts[:, 1] - xe[1]) / span[1], (pts[:, 0] - xe[0]) / span[0])
    return pts[np.argsort(ang, kind="stable")]


def vertices_converge(matrices: SystemMatrices, u: float, halfwidth: np.ndarray,
                      opts: SimOptions = SimOptions(), units: Units | None = None) -> bool:
    """Whether all box vertices around the equilibrium for ``u`` converge.

    An input without a high-voltage equilibrium counts as infeasible.
    """
    try:
        xe = _single_source_equilibrium(matrices, u)
    except PowerFlowError:
        return False
    starts = box_vertices(xe, np.asarray(halfwidth, dtype=float))
    load = _guarded(matrices)
    if np.any(starts[:, load] <= opts.v_div * (units.volt if units else 1.0)):
        return False
    trajs = simulate_many(matrices, u, starts, xe, opts, units=units, keep=False)
    return all(tr.converged for tr in trajs)


@dataclass
class BorderlineResult:
    u_min: float
    bracket: tuple[float, float]
    probes: list = field(default_factory=list)


def borderline_design(matrices: SystemMatrices, halfwidth: np.ndarray, bracket: tuple[float, float] | None = None,
                      width: float = 0.1, opts: SimOptions = SimOptions(), units: Units | None = None,
                      ) -> BorderlineResult:
    """Smallest single-source input for which every box vertex converges.

    ``width`` is the final bracket width in volts.  Without an explicit
    bracket the upper end is grown geometrically from the smallest input that
    has an equilibrium.
    """
    if matrices.n_s != 1:
        raise ValueError("borderline design needs a single source")
    volt = units.volt if units else 1.0
    probes = []

    def feasible(u):
        ok = vertices_converge(matrices, u, halfwidth, opts, units)
        probes.append((float(u), ok))
        return ok

    if bracket is None:
        lo = _min_input(matrices)
        hi = max(2.0 * lo, lo + 10.0 * volt)
        for _ in range(40):
            if feasible(hi):
                break
            lo, hi = hi, hi * 1.5
        else:
            raise BorderlineError("no converging input found while growing the bracket")
    else:
        lo, hi = map(float, bracket)
        if not feasible(hi):
            raise BorderlineError(f"upper end u={hi:g} of the bracket does not converge")
        if feasible(lo):
            raise BorderlineError(f"lower end u={lo:g} of the bracket already converges")
    while hi - lo > width * volt:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return BorderlineResult(hi, (lo, hi), probes)


def _min_input(matrices: SystemMatrices) -> float:
    """Smallest single-source input with a high-voltage equilibrium, by bisection."""
    lo, hi = 0.0, 1.0
    while True:
        try:
            power_flow(matrices, np.array([hi]))
            break
        except PowerFlowError:
            lo, hi = hi, 2.0 * hi
            if hi > 1e12:
                raise BorderlineError("no input admits an equilibrium")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        try:
            power_flow(matrices, np.array([mid]))
            hi = mid
        except PowerFlowError:
            lo = mid
    return hi


def relative_difference(u_synth: float, u_border: float) -> float:
    if u_border <= 0:
        raise ValueError("borderline input must be positive")
    return abs(u_synth - u_border) / u_border


def write_summary(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
