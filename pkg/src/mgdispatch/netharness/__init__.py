"""Socket-level reproduction of the controller / hub / unit topology."""
from .harness import (Counters, HarnessError, LinkState, NetworkTrace, drop_policy,
                      run_networked)
from .wire import MsgType, Phase, WireError, WireMessage, decode, encode

__all__ = ["Counters", "HarnessError", "LinkState", "NetworkTrace", "drop_policy", "run_networked",
           "MsgType", "Phase", "WireError", "WireMessage", "decode", "encode"]
