"""
Designing a safe setpoint for a single CPL bus
==============================================

A source behind a resistive-inductive branch feeds a 300 W constant power
load.  We certify the transient behaviour of the operating box (20 A, 20 V)
and then pick the smallest source voltage whose equilibrium sits above the
certified voltage floor.
"""

import numpy as np

from dcroa.netmodel import build_dynamics, halfwidth_vector, load_fixture
from dcroa.sim import Units, vertex_sweep
from dcroa.steadystate import run_pipeline

spec = load_fixture("one_bus")
print(spec.name)

# Steps 1 to 4 in one call: certificate first, synthesis second.
cert, result, timings = run_pipeline(spec)
print(f"beta = {cert.lpv.beta:.4f}, h0 = {cert.lpv.h0[0]:.4f} S")
print(f"certified voltage floor: {cert.floor[0]:.2f} V")
print(f"synthesized source voltage: {result.point.u[0]:.2f} V ({result.relaxation} relaxation)")

# The sublevel ellipsoid is a matrix P; every corner of the box lies inside it.
P = cert.sublevel.P
corners = cert.box.vertices()
print("V at box corners:", np.round(np.einsum("ki,ij,kj->k", corners, P, corners), 4))

# Simulating from each corner is the empirical counterpart of the certificate.
M = build_dynamics(spec)
trajs = vertex_sweep(M, result.point.u, result.point.x, halfwidth_vector(spec), units=Units.of(spec, M))
print("corner runs:", [t.classification for t in trajs])

for name, secs in sorted(timings.items()):
    print(f"  {name:18s} {secs:.4f}")
