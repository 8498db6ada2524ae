"""
How conservative is the certificate?
====================================

Bisecting on the source voltage with simulations gives the smallest input
for which every corner of the operating box still converges.  Comparing it
with the certified design yields the relative difference (RD).  A coarse map
of the region of attraction around the certified equilibrium closes the demo.
"""

from dcroa.netmodel import build_dynamics, halfwidth_vector, load_fixture
from dcroa.sim import Units, borderline_design, relative_difference, roa_grid_2d
from dcroa.steadystate import run_pipeline

spec = load_fixture("one_bus")
M = build_dynamics(spec)
hw = halfwidth_vector(spec)
units = Units.of(spec, M)

_, result, _ = run_pipeline(spec)
u_cert = result.point.u[0]

border = borderline_design(M, hw, units=units)
print(f"borderline input {border.u_min:.2f} V after {len(border.probes)} simulated probes")
print(f"certified input  {u_cert:.2f} V, RD = {relative_difference(u_cert, border.u_min):.3f}")

# The window spans three half-widths on each side of the equilibrium.
window = 3 * hw
roa = roa_grid_2d(M, u_cert, window, points=61, units=units)
share = roa.converged.mean()
print(f"{share:.0%} of the grid converges; box inside the region: {roa.contains_box(hw)}")
print(f"{len(roa.boundary)} boundary points located by edge bisection")
