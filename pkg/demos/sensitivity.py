"""
Sensitivity of the certified setpoint
=====================================

Smaller operating boxes and lighter loads let the design run at a lower
voltage.  This script repeats the one-bus design over a few variants.
"""

import dataclasses

from dcroa.netmodel import load_fixture
from dcroa.steadystate import run_pipeline

base = load_fixture("one_bus")

for current, voltage in [(10.0, 20.0), (20.0, 10.0), (20.0, 20.0)]:
    spec = dataclasses.replace(base, halfwidth={"current": current, "voltage": voltage})
    _, res, _ = run_pipeline(spec)
    print(f"box ({current:4.0f} A, {voltage:4.0f} V): u = {res.point.u[0]:7.2f} V")

for kw in (0.3, 3.0, 5.0, 10.0):
    buses = tuple(dataclasses.replace(b, cpl_power=-1e3 * kw) for b in base.buses)
    cert, res, _ = run_pipeline(dataclasses.replace(base, buses=buses))
    print(f"CPL {kw:5.1f} kW: floor {cert.floor[0]:7.2f} V, u = {res.point.u[0]:7.2f} V")
