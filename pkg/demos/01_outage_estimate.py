"""
Estimating battery charge through a communication outage
========================================================

Battery 2 loses its link between 11 h and 13 h. The controller keeps an
ellipsoid that must contain the true charge of every battery; while no
measurement arrives the ellipsoid for battery 2 can only grow.
"""

import numpy as np

from mgdispatch import scenarios, sim

sc = scenarios.case1(seed=0)
trace = sim.run(sc)

# half-width of the bound on battery 2, i.e. sqrt of the diagonal entry
for r in trace[40:58]:
    half = np.sqrt(r.P[1, 1])
    link = "up  " if r.conn.A_b[1] else "DOWN"
    print(f"{r.t:5.2f} h  link {link}  x2 {r.x[1]:6.3f}  estimate {r.x_hat[1]:6.3f} +- {half:.3f}")

report = sim.verify_trace(trace, sc.config)
print()
print(report.summary())

# while the link is down the battery follows the tail of its last plan
out = [r.k for r in trace if not r.conn.A_b[1]]
held = trace[out[0] - 1].plans_b[1]
print("applied during outage:", np.round([trace[k].u_b[1] for k in out], 4))
print("stored plan tail     :", np.round(held[1:len(out) + 1], 4))
