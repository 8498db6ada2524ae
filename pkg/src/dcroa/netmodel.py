"""Network descriptions and the matrices of the averaged RLC microgrid model.

The dynamic model is

    D dx/dt = A x + B2 (g * u) + B1 (p_load / (C1 x))

with state ``x = [branch currents; non-CPL bus voltages; CPL bus voltages]``.
``g`` is the source input gain: ``1/R_s`` for a resistive (Thevenin) source
feeding its bus directly, and ``1`` for a source with a series inductance, in
which case the source branch current is a state and ``u`` drives that row.

The steady-state model uses the nodal conductance blocks between the ideal
source terminals (voltage ``u``) and the network buses.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


class NetworkError(ValueError):
    """Raised when a network description is malformed or physically invalid."""


@dataclass(frozen=True)
class BusSpec:
    id: str
    capacitance: float
    shunt_resistance: float | None = None
    has_source: bool = False
    source_resistance: float | None = None
    source_inductance: float | None = None
    has_cpl: bool = False
    cpl_power: float = 0.0
    voltage_bounds: tuple[float, float] | None = None


@dataclass(frozen=True)
class LineSpec:
    from_bus: str
    to_bus: str
    resistance: float
    inductance: float


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    buses: tuple[BusSpec, ...]
    lines: tuple[LineSpec, ...]
    base_voltage: float
    base_power: float
    setpoint_bounds: tuple[float, float]
    voltage_bounds: tuple[float, float]
    generation_bounds: tuple[float, float]
    costs: Mapping[str, float] = field(default_factory=dict)
    halfwidth: Mapping[str, Any] = field(default_factory=dict)
    per_unit: bool = False
    normalized: bool = False
    name: str = ""

    @property
    def sources(self) -> tuple[BusSpec, ...]:
        return tuple(b for b in self.buses if b.has_source)

    @property
    def n_b(self) -> int:
        return len(self.buses)

    @property
    def n_s(self) -> int:
        return len(self.sources)

    @property
    def n_l(self) -> int:
        return sum(b.has_cpl for b in self.buses)

    @property
    def n_t(self) -> int:
        """Number of branch currents: lines plus inductive source branches."""
        return len(self.lines) + sum(b.source_inductance is not None for b in self.sources)

    @property
    def n(self) -> int:
        return self.n_b + self.n_t

    @property
    def impedance_base(self) -> float:
        return self.base_voltage**2 / self.base_power

    @property
    def current_base(self) -> float:
        return self.base_power / self.base_voltage

    def cost_vector(self) -> np.ndarray:
        return np.array([float(self.costs.get(b.id, 1.0)) for b in self.sources])

    def bus_voltage_bounds(self, bus: BusSpec) -> tuple[float, float]:
        return bus.voltage_bounds if bus.voltage_bounds is not None else self.voltage_bounds


@dataclass(frozen=True)
class StateLayout:
    """Index bookkeeping for the state vector."""

    labels: tuple[str, ...]
    kinds: tuple[str, ...]  # "current" or "voltage" per state
    bus_index: Mapping[str, int]  # bus id -> state index of its voltage
    voltage_idx: np.ndarray  # state indices of all bus voltages, in state order
    load_idx: np.ndarray  # state indices of CPL bus voltages
    source_idx: np.ndarray  # state index driven by each source (bus row or branch row)
    branch_idx: np.ndarray  # state indices of branch currents

    @property
    def voltage_bus_ids(self) -> tuple[str, ...]:
        inv = {v: k for k, v in self.bus_index.items()}
        return tuple(inv[i] for i in self.voltage_idx)


@dataclass(frozen=True, eq=False)
class SystemMatrices:
    D: np.ndarray
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    input_gain: np.ndarray
    cpl_power: np.ndarray
    Y_ss: np.ndarray
    Y_sl: np.ndarray
    Y_ll: np.ndarray
    layout: StateLayout

    @property
    def C1(self) -> np.ndarray:
        return self.B1.T

    @property
    def C2(self) -> np.ndarray:
        return self.B2.T

    @property
    def Y_ls(self) -> np.ndarray:
        return self.Y_sl.T

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_l(self) -> int:
        return self.B1.shape[1]

    @property
    def n_s(self) -> int:
        return self.B2.shape[1]

    def rhs(self, x: np.ndarray, u: np.ndarray, p_load: np.ndarray | None = None) -> np.ndarray:
        """Right-hand side of the dynamics, ``dx/dt``."""
        p = self.cpl_power if p_load is None else p_load
        force = self.A @ x + self.B2 @ (self.input_gain * u) + self.B1 @ (p / (self.C1 @ x))
        return force / np.diag(self.D)


# ---------------------------------------------------------------------------
# parsing


def _schema() -> dict:
    text = resources.files("dcroa").joinpath("data/network.schema.json").read_text()
    return json.loads(text)


def parse_network(doc: Mapping[str, Any] | str) -> NetworkSpec:
    """Validate a network document (mapping or JSON text) and build a NetworkSpec."""
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise NetworkError(f"not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise NetworkError(f"schema violation at {where}: {exc.message}") from exc

    buses = []
    for b in doc["buses"]:
        has_source = bool(b.get("has_source", False))
        has_cpl = bool(b.get("has_cpl", False))
        if has_source and "source_resistance" not in b:
            raise NetworkError(f"bus {b['id']}: source requires source_resistance")
        if not has_source and (b.get("source_resistance") or b.get("source_inductance")):
            raise NetworkError(f"bus {b['id']}: source parameters given without has_source")
        if has_cpl and "cpl_power" not in b:
            raise NetworkError(f"bus {b['id']}: CPL requires cpl_power")
        vb = b.get("voltage_bounds")
        buses.append(BusSpec(
            id=b["id"],
            capacitance=float(b["capacitance"]),
            shunt_resistance=_opt_float(b.get("shunt_resistance")),
            has_source=has_source,
            source_resistance=_opt_float(b.get("source_resistance")) if has_source else None,
            source_inductance=_opt_float(b.get("source_inductance")) if has_source else None,
            has_cpl=has_cpl,
            cpl_power=float(b.get("cpl_power", 0.0)) if has_cpl else 0.0,
            voltage_bounds=tuple(map(float, vb)) if vb is not None else None,
        ))
    lines = tuple(
        LineSpec(l["from"], l["to"], float(l["resistance"]), float(l["inductance"]))
        for l in doc["lines"]
    )
    bounds = doc["bounds"]
    spec = NetworkSpec(
        buses=tuple(buses),
        lines=lines,
        base_voltage=float(doc["base"]["voltage"]),
        base_power=float(doc["base"]["power"]),
        setpoint_bounds=tuple(map(float, bounds["setpoint"])),
        voltage_bounds=tuple(map(float, bounds["voltage"])),
        generation_bounds=tuple(map(float, bounds["generation"])),
        costs={k: float(v) for k, v in doc.get("costs", {}).items()},
        halfwidth=copy.deepcopy(dict(doc["operating_halfwidth"])),
        per_unit=bool(doc.get("per_unit", False)),
        name=doc.get("name", ""),
    )
    validate_network(spec)
    return spec


def _opt_float(v):
    return None if v is None else float(v)


def load_network(path: str | Path) -> NetworkSpec:
    return parse_network(Path(path).read_text())


def validate_network(spec: NetworkSpec) -> None:
    if not spec.buses:
        raise NetworkError("network has no buses")
    ids = [b.id for b in spec.buses]
    if len(set(ids)) != len(ids):
        raise NetworkError("duplicate bus ids")
    known = set(ids)
    for b in spec.buses:
        if not b.capacitance > 0:
            raise NetworkError(f"bus {b.id}: capacitance must be positive")
        if b.shunt_resistance is not None and not b.shunt_resistance > 0:
            raise NetworkError(f"bus {b.id}: shunt resistance must be positive")
        if b.has_source and not (b.source_resistance or 0) > 0:
            raise NetworkError(f"bus {b.id}: source resistance must be positive")
        if b.source_inductance is not None and not b.source_inductance > 0:
            raise NetworkError(f"bus {b.id}: source inductance must be positive")
        if b.cpl_power > 0:
            raise NetworkError(f"bus {b.id}: CPL power must be non-positive, got {b.cpl_power}")
        lo, hi = spec.bus_voltage_bounds(b)
        if not lo < hi:
            raise NetworkError(f"bus {b.id}: empty voltage bounds")
    for l in spec.lines:
        if l.from_bus not in known or l.to_bus not in known:
            raise NetworkError(f"line {l.from_bus}-{l.to_bus}: unknown endpoint")
        if l.from_bus == l.to_bus:
            raise NetworkError(f"line {l.from_bus}-{l.to_bus}: endpoints must differ")
        if not (l.resistance > 0 and l.inductance > 0):
            raise NetworkError(f"line {l.from_bus}-{l.to_bus}: R and L must be positive")
    for name in ("setpoint_bounds", "generation_bounds"):
        lo, hi = getattr(spec, name)
        if not lo <= hi:
            raise NetworkError(f"{name} is an empty interval")
    if any(c < 0 for c in spec.costs.values()):
        raise NetworkError("cost coefficients must be non-negative")
    unknown = set(spec.costs) - {b.id for b in spec.sources}
    if unknown:
        raise NetworkError(f"costs given for non-source buses: {sorted(unknown)}")
    index = {bid: k for k, bid in enumerate(ids)}
    if spec.lines:
        rows = [index[l.from_bus] for l in spec.lines]
        cols = [index[l.to_bus] for l in spec.lines]
        graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
        ncomp, _ = connected_components(graph, directed=False)
    else:
        ncomp = len(ids)
    if ncomp != 1:
        raise NetworkError("network graph is not connected")
    halfwidth_vector(spec)


# ---------------------------------------------------------------------------
# state layout and matrices


def state_layout(spec: NetworkSpec) -> StateLayout:
    labels, kinds = [], []
    for l in spec.lines:
        labels.append(f"i[{l.from_bus}-{l.to_bus}]")
        kinds.append("current")
    branch_of = {}
    for b in spec.sources:
        if b.source_inductance is not None:
            branch_of[b.id] = len(labels)
            labels.append(f"i[src {b.id}]")
            kinds.append("current")
    n_branch = len(labels)
    plain = [b for b in spec.buses if not b.has_cpl]
    loads = [b for b in spec.buses if b.has_cpl]
    bus_index = {}
    for b in plain + loads:
        bus_index[b.id] = len(labels)
        labels.append(f"v[{b.id}]")
        kinds.append("voltage")
    source_idx = [branch_of.get(b.id, bus_index[b.id]) for b in spec.sources]
    return StateLayout(
        labels=tuple(labels),
        kinds=tuple(kinds),
        bus_index=bus_index,
        voltage_idx=np.arange(n_branch, len(labels)),
        load_idx=np.array([bus_index[b.id] for b in loads], dtype=int),
        source_idx=np.array(source_idx, dtype=int),
        branch_idx=np.arange(n_branch),
    )


def halfwidth_vector(spec: NetworkSpec) -> np.ndarray:
    """Per-state half-widths of the operating box, in state order."""
    kinds = state_layout(spec).kinds
    hw = spec.halfwidth
    if "states" in hw:
        vec = np.asarray(hw["states"], dtype=float)
        if vec.shape != (len(kinds),):
            raise NetworkError(f"operating_halfwidth.states must have {len(kinds)} entries")
    else:
        missing = {k for k in kinds if k not in hw}
        if missing:
            raise NetworkError(f"operating_halfwidth lacks {sorted(missing)}")
        vec = np.array([float(hw[k]) for k in kinds])
    if not np.all(vec > 0):
        raise NetworkError("operating half-widths must be strictly positive")
    return vec


def build_dynamics(spec: NetworkSpec) -> SystemMatrices:
    """Assemble D, A, B1, B2 (and the conductance blocks) from KCL/KVL."""
    lay = state_layout(spec)
    n = len(lay.labels)
    D = np.zeros(n)
    A = np.zeros((n, n))
    for k, l in enumerate(spec.lines):
        a, b = lay.bus_index[l.from_bus], lay.bus_index[l.to_bus]
        D[k] = l.inductance
        A[k, k] = -l.resistance
        A[k, a], A[k, b] = 1.0, -1.0
        A[a, k], A[b, k] = -1.0, 1.0
    for bus in spec.buses:
        j = lay.bus_index[bus.id]
        D[j] = bus.capacitance
        if bus.shunt_resistance is not None:
            A[j, j] -= 1.0 / bus.shunt_resistance
    B2 = np.zeros((n, spec.n_s))
    gain = np.zeros(spec.n_s)
    for k, bus in enumerate(spec.sources):
        j = lay.bus_index[bus.id]
        row = lay.source_idx[k]
        B2[row, k] = 1.0
        if bus.source_inductance is None:
            A[j, j] -= 1.0 / bus.source_resistance
            gain[k] = 1.0 / bus.source_resistance
        else:
            D[row] = bus.source_inductance
            A[row, row] = -bus.source_resistance
            A[row, j], A[j, row] = -1.0, 1.0
            gain[k] = 1.0
    B1 = np.zeros((n, len(lay.load_idx)))
    B1[lay.load_idx, np.arange(len(lay.load_idx))] = 1.0
    loads = [b for b in spec.buses if b.has_cpl]
    Y_ss, Y_sl, Y_ll = build_conductance(spec, lay)
    return SystemMatrices(
        D=np.diag(D), A=A, B1=B1, B2=B2, input_gain=gain,
        cpl_power=np.array([b.cpl_power for b in loads]),
        Y_ss=Y_ss, Y_sl=Y_sl, Y_ll=Y_ll, layout=lay,
    )


def build_conductance(spec: NetworkSpec, layout: StateLayout | None = None):
    """Conductance blocks ``(Y_ss, Y_sl, Y_ll)`` of the steady-state model.

    The source side holds the ideal source terminals (voltage ``u``); the
    other side holds every bus voltage in state order, so that
    ``p_s = u * (Y_ss u + Y_sl v)`` and ``p = v * (Y_ll v + Y_sl.T u)`` where
    ``p`` is the CPL power at CPL buses and zero elsewhere.
    """
    lay = layout or state_layout(spec)
    pos = {bid: k for k, bid in enumerate(lay.voltage_bus_ids)}
    nb, ns = len(pos), spec.n_s
    Y_ll = np.zeros((nb, nb))
    for l in spec.lines:
        a, b, g = pos[l.from_bus], pos[l.to_bus], 1.0 / l.resistance
        Y_ll[a, a] += g
        Y_ll[b, b] += g
        Y_ll[a, b] -= g
        Y_ll[b, a] -= g
    for bus in spec.buses:
        if bus.shunt_resistance is not None:
            Y_ll[pos[bus.id], pos[bus.id]] += 1.0 / bus.shunt_resistance
    Y_ss = np.zeros((ns, ns))
    Y_sl = np.zeros((ns, nb))
    for k, bus in enumerate(spec.sources):
        g = 1.0 / bus.source_resistance
        Y_ss[k, k] = g
        Y_sl[k, pos[bus.id]] = -g
        Y_ll[pos[bus.id], pos[bus.id]] += g
    return Y_ss, Y_sl, Y_ll


# ---------------------------------------------------------------------------
# per-unit conversion


def per_unit(spec: NetworkSpec) -> NetworkSpec:
    """Normalise by base voltage V0 and base power P0 (impedance base V0**2/P0).

    Time stays in seconds, so inductances scale like resistances and
    capacitances scale inversely.
    """
    if spec.normalized:
        raise NetworkError("network is already in per-unit")
    return _rescale(spec, inverse=False)


def denormalize(spec: NetworkSpec) -> NetworkSpec:
    if not spec.normalized:
        raise NetworkError("network is not in per-unit")
    return _rescale(spec, inverse=True)


def _rescale(spec: NetworkSpec, inverse: bool) -> NetworkSpec:
    V0, P0 = spec.base_voltage, spec.base_power
    if not (V0 > 0 and P0 > 0):
        raise NetworkError("base voltage and power must be positive")
    Zb, Ib = V0**2 / P0, P0 / V0

    def s(x, base):
        if x is None:
            return None
        return x * base if inverse else x / base

    buses = tuple(
        replace(
            b,
            capacitance=s(b.capacitance, 1.0 / Zb),
            shunt_resistance=s(b.shunt_resistance, Zb),
            source_resistance=s(b.source_resistance, Zb),
            source_inductance=s(b.source_inductance, Zb),
            cpl_power=s(b.cpl_power, P0),
            voltage_bounds=None if b.voltage_bounds is None else tuple(s(v, V0) for v in b.voltage_bounds),
        )
        for b in spec.buses
    )
    lines = tuple(replace(l, resistance=s(l.resistance, Zb), inductance=s(l.inductance, Zb)) for l in spec.lines)
    hw = dict(spec.halfwidth)
    if "states" in hw:
        kinds = state_layout(spec).kinds
        hw["states"] = [s(w, Ib if k == "current" else V0) for w, k in zip(hw["states"], kinds)]
    else:
        if "current" in hw:
            hw["current"] = s(hw["current"], Ib)
        if "voltage" in hw:
            hw["voltage"] = s(hw["voltage"], V0)
    return replace(
        spec,
        buses=buses,
        lines=lines,
        setpoint_bounds=tuple(s(v, V0) for v in spec.setpoint_bounds),
        voltage_bounds=tuple(s(v, V0) for v in spec.voltage_bounds),
        generation_bounds=tuple(s(v, P0) for v in spec.generation_bounds),
        halfwidth=hw,
        normalized=not inverse,
    )


def working_model(spec: NetworkSpec) -> NetworkSpec:
    """The model used downstream: per-unit when the document asks for it."""
    if spec.per_unit and not spec.normalized:
        return per_unit(spec)
    return spec


# ---------------------------------------------------------------------------
# serialisation


def to_document(spec: NetworkSpec) -> dict:
    buses = []
    for b in spec.buses:
        d: dict[str, Any] = {"id": b.id, "capacitance": b.capacitance}
        if b.shunt_resistance is not None:
            d["shunt_resistance"] = b.shunt_resistance
        if b.has_source:
            d["has_source"] = True
            d["source_resistance"] = b.source_resistance
            if b.source_inductance is not None:
                d["source_inductance"] = b.source_inductance
        if b.has_cpl:
            d["has_cpl"] = True
            d["cpl_power"] = b.cpl_power
        if b.voltage_bounds is not None:
            d["voltage_bounds"] = list(b.voltage_bounds)
        buses.append(d)
    return {
        "name": spec.name,
        "per_unit": spec.per_unit,
        "base": {"voltage": spec.base_voltage, "power": spec.base_power},
        "buses": buses,
        "lines": [
            {"from": l.from_bus, "to": l.to_bus, "resistance": l.resistance, "inductance": l.inductance}
            for l in spec.lines
        ],
        "bounds": {
            "setpoint": list(spec.setpoint_bounds),
            "voltage": list(spec.voltage_bounds),
            "generation": list(spec.generation_bounds),
        },
        "costs": dict(spec.costs),
        "operating_halfwidth": dict(spec.halfwidth),
    }


def fingerprint(spec: NetworkSpec) -> str:
    """Content hash identifying a network (and whether it is normalised)."""
    doc = to_document(spec)
    doc["normalized"] = spec.normalized
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def fixture_path(name: str) -> Path:
    """Path of a bundled network document, e.g. ``fixture_path("one_bus")``."""
    return Path(str(resources.files("dcroa").joinpath(f"data/{name}.json")))


def load_fixture(name: str) -> NetworkSpec:
    return load_network(fixture_path(name))
