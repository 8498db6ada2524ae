"""
A meshed 14-bus microgrid
=========================

The IEEE 14-bus topology with five droop-controlled sources and eleven CPL
buses, in per-unit.  The plain optimal power flow comes first; its conic
relaxation is exact.  The certified design follows.  With the bundled
per-bus data the certified floor on the source buses that also carry a load
exceeds what those buses can reach, so synthesis reports that the floor is
the only obstacle.  Expect a few minutes of solver time for the certificate.
"""

import numpy as np

from dcroa.netmodel import build_dynamics, load_fixture, working_model
from dcroa.steadystate import SynthesisInfeasible, run_pipeline, solve_opf

spec = working_model(load_fixture("ieee14_dc"))
M = build_dynamics(spec)
print(f"{spec.n_b} buses, {spec.n_t} lines, {M.n} states")

opf = solve_opf(spec, M)
print("OPF setpoints:", np.round(opf.point.u, 4), f"({opf.relaxation})")
print("lowest bus voltage:", round(float(opf.point.v.min()), 4))

try:
    cert, res, timings = run_pipeline(spec)
    print("certified setpoints:", np.round(res.point.u, 4))
except SynthesisInfeasible as exc:
    print("synthesis:", exc)
