"""Zermelo's problem under an uncertain current, step by step.

A boat starts at (2.25, 1) and must reach the origin while a current
``(p1 + p2 y, 0)`` pushes it along x. The current parameters are only known
as a Gaussian, ``p ~ N((1, -1), diag(0.2^2, 0.1^2))``.

The walkthrough:

1. solves the usual minimum-time problem with the nominal current;
2. flies that control through 1000 sampled currents and looks at the misses;
3. re-solves so that the *average* endpoint hits the target;
4. re-solves again to shrink the endpoint dispersion;
5. compares the miss-risk curves of the first and last controls.

Run with ``python demos/zermelo_walkthrough.py [out_dir]``. The dispersion
solve is the slow part (several minutes on one core).
"""
import os
import sys
import time

import numpy as np

from tychopt import builtin_problem, feasibility_check, monte_carlo, risk_curve, solve_ocp
from tychopt.verification import svg_risk, svg_scatter

out = sys.argv[1] if len(sys.argv) > 1 else "zermelo_demo"
os.makedirs(out, exist_ok=True)
N, SEED = 50, 12345

# --- 1. the nominal answer -------------------------------------------------
z0 = builtin_problem("Z0")
t = time.perf_counter()
base = solve_ocp(z0, nodes=N)
print(f"baseline: tf = {base.tf:.4f}  ({base.status}, {time.perf_counter() - t:.1f} s)")
fc = feasibility_check(z0, base.control)
print(f"  re-propagated with the nominal current, the boat misses by {fc.terminal_miss:.1e}")

# --- 2. what the uncertain current does to it ------------------------------
rep0 = monte_carlo(z0, base.control, 1000, SEED)
print(f"  over 1000 sampled currents: mean endpoint {np.round(rep0.mean, 4)}, "
      f"trace(cov) {rep0.trace_cov:.4f}")
hits = np.count_nonzero(np.linalg.norm(rep0.endpoints, axis=1) == 0.0)
print(f"  samples landing exactly on the target: {hits}")

# --- 3. hit the target on average ------------------------------------------
# The cost is still time, but the endpoint constraint now applies to the
# sigma-point average of five copies of the dynamics.
z1 = builtin_problem("Z1")
mean_sol = solve_ocp(z1, nodes=N, warm_start=base.control)
rep1 = monte_carlo(z1, mean_sol.control, 1000, SEED)
print(f"mean-targeting: tf = {mean_sol.tf:.4f}; MC mean {rep1.mean} "
      f"(standard error {rep1.standard_error})")

# --- 4. squeeze the spread -------------------------------------------------
z2 = builtin_problem("Z2")
t = time.perf_counter()
disp = solve_ocp(z2, nodes=N, warm_start=mean_sol.control, tf_guess=6.0)
rep2 = monte_carlo(z2, disp.control, 1000, SEED)
print(f"dispersion: tf = {disp.tf:.3f} ({disp.status}, {time.perf_counter() - t:.0f} s); "
      f"trace(cov) {rep2.trace_cov:.4f} vs {rep0.trace_cov:.4f} for the baseline")

# --- 5. risk of missing by more than eps -----------------------------------
c0, c2 = risk_curve(rep0, z0.target), risk_curve(rep2, z0.target)
r0, r2 = (risk_curve(r, z0.target, [0.2])[0, 1] for r in (rep0, rep2))
print(f"Pr(miss > 0.2): baseline {r0:.3f}, dispersion-optimal {r2:.3f}")

# both clouds on one plot, each with its 95 % ellipse
svg_scatter(rep0, path=os.path.join(out, "scatter.svg"), extra=[(rep2, "#2ca02c")])
svg_risk([("baseline", c0), ("dispersion", c2)], path=os.path.join(out, "risk.svg"))
print(f"figures written to {out}/")
