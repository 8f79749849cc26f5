"""Power dispatch for networked microgrids with faulty links.

Set-membership state estimation of battery SoC, receding-horizon dispatch
with per-unit default plans, and one-step deviation compensation, run either
in process (:func:`mgdispatch.sim.run`) or over local sockets
(:func:`mgdispatch.netharness.run_networked`).
"""
from .model import ConnectionState, ControlPlan, SystemConfig
from .mpc import GridFixed, GridVariable, Islanded
from .sim import FaultEvent, Scenario, run, verify_trace

__all__ = ["ConnectionState", "ControlPlan", "SystemConfig", "GridFixed", "GridVariable",
           "Islanded", "FaultEvent", "Scenario", "run", "verify_trace"]
__version__ = "0.1.0"
