"""
The same loop over sockets
==========================

Controller, hubs and unit agents exchange framed messages over local TCP.
Hubs drop traffic of units whose link is down, so the outage is produced by
the network rather than by a flag. The result must match the in-process
simulator exactly.
"""

import numpy as np

from mgdispatch import scenarios, sim
from mgdispatch.netharness import run_networked

sc = scenarios.case1(seed=1, duration=14.0)
net = run_networked(sc, jitter=0.001)
ref = sim.run(sc)

diff = max(np.abs(a.x_hat - b.x_hat).max() for a, b in zip(net, ref))
print(f"steps {len(net)}, largest estimate difference {diff:.1e}")

for (unit, direction), c in sorted(net.counters.links.items()):
    if c.dropped:
        print(f"unit {unit} {direction:4s}: sent {c.sent}, delivered {c.delivered}, dropped {c.dropped}")
