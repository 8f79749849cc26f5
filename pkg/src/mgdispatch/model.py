"""Plant model of the multi-microgrid system.

Battery integrator dynamics, connection-vector semantics for set-point
selection, PV curtailment, measurement generation, the default-plan fallback
used by units that lose their communication link, and the time-varying
matrices consumed by the set-membership estimator.

Units: powers in pu, state of charge in puh, time in hours.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


def _vec(a, n: int | None = None, name: str = "vector") -> np.ndarray:
    v = np.atleast_1d(np.asarray(a, dtype=float))
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
    return v


def _mask(a, n: int | None = None, name: str = "mask") -> np.ndarray:
    m = np.atleast_1d(np.asarray(a))
    if m.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if n is not None and m.shape[0] != n:
        raise ValueError(f"{name} has length {m.shape[0]}, expected {n}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{name} must contain only 0/1 entries")
    return m.astype(bool)


def _same_length(*arrays: np.ndarray) -> None:
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) != 1:
        raise ValueError(f"dimension mismatch: lengths {sorted(lengths)}")


def _spd(M, n: int, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape != (n, n):
        raise ValueError(f"{name} must be {n}x{n}, got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return M


@dataclass
class SystemConfig:
    """Unit counts, limits, cost weights and noise bounds of one system.

    ``SystemConfig.reference()`` returns the three-microgrid reference
    parameters; every field can be overridden with ``dataclasses.replace``
    (the arrays are re-validated).
    """

    n_b: int
    n_s: int
    n_l: int
    T_s: float
    N: int
    P_s_min: np.ndarray
    P_s_max: np.ndarray
    P_b_min: np.ndarray
    P_b_max: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    x_b_min: np.ndarray
    x_b_max: np.ndarray
    C_s: np.ndarray
    C_b1: np.ndarray
    C_b2: np.ndarray
    C_g1: float
    C_g2: float
    lambda_b: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        nb, ns = self.n_b, self.n_s
        if min(nb, ns, self.n_l) < 1:
            raise ValueError("unit counts must be positive")
        if not self.T_s > 0:
            raise ValueError("T_s must be positive")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("horizon N must be an integer >= 1")
        self.N = int(self.N)
        self.T_s = float(self.T_s)
        for name in ("P_s_min", "P_s_max", "C_s"):
            setattr(self, name, _vec(getattr(self, name), ns, name))
        for name in ("P_b_min", "P_b_max", "x_min", "x_max", "x_b_min",
                     "x_b_max", "C_b1", "C_b2", "lambda_b"):
            setattr(self, name, _vec(getattr(self, name), nb, name))
        if np.any(self.P_s_min > self.P_s_max) or np.any(self.P_b_min > self.P_b_max):
            raise ValueError("power limits: min exceeds max")
        if not (np.all(self.x_min <= self.x_b_min) and np.all(self.x_b_min <= self.x_b_max)
                and np.all(self.x_b_max <= self.x_max)):
            raise ValueError("SoC limits must satisfy x_min <= x_b_min <= x_b_max <= x_max")
        if np.any(self.lambda_b < 0) or not np.any(self.lambda_b > 0):
            raise ValueError("lambda_b must be nonnegative with at least one positive entry")
        self.C_g1 = float(self.C_g1)
        self.C_g2 = float(self.C_g2)
        self.Q = _spd(self.Q, nb, "Q")
        self.R = _spd(self.R, nb, "R")
        self.P0 = _spd(self.P0, nb, "P0")

    @classmethod
    def reference(cls, T_s: float = 0.25, N: int = 12) -> "SystemConfig":
        return cls(
            n_b=3, n_s=3, n_l=3, T_s=T_s, N=N,
            P_s_min=[0.0, 0.0, 0.0], P_s_max=[1.5, 3.0, 4.5],
            P_b_min=[-3.0, -4.0, -6.0], P_b_max=[3.0, 4.0, 6.0],
            x_min=[0.0, 0.0, 0.0], x_max=[12.0, 16.0, 24.0],
            x_b_min=[0.2, 0.3, 0.3], x_b_max=[11.8, 15.7, 23.7],
            C_s=[1.0, 1.0, 1.0], C_b1=[0.2, 0.15, 0.1], C_b2=[0.3, 0.3, 0.3],
            C_g1=0.5, C_g2=0.1, lambda_b=[1.0, 1.0, 1.0],
            Q=0.03 * np.eye(3), R=0.0012 * np.eye(3), P0=0.12 * np.eye(3),
        )

    def with_updates(self, **changes) -> "SystemConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class ConnectionState:
    """Per-layer Boolean health vectors at one time step.

    ``A_*`` is the communication layer, ``G_*`` the electrical layer.
    Loads carry no communication vector; their telemetry is always available.
    """

    A_b: np.ndarray
    A_s: np.ndarray
    G_b: np.ndarray
    G_s: np.ndarray
    G_l: np.ndarray

    def __post_init__(self):
        for name in ("A_b", "A_s", "G_b", "G_s", "G_l"):
            object.__setattr__(self, name, _mask(getattr(self, name), name=name))
        _same_length(self.A_b, self.G_b)
        _same_length(self.A_s, self.G_s)

    @classmethod
    def healthy(cls, n_b: int, n_s: int, n_l: int) -> "ConnectionState":
        return cls(np.ones(n_b, bool), np.ones(n_s, bool), np.ones(n_b, bool),
                   np.ones(n_s, bool), np.ones(n_l, bool))

    @property
    def E_b(self) -> np.ndarray:
        return self.A_b & self.G_b

    @property
    def E_s(self) -> np.ndarray:
        return self.A_s & self.G_s

    @property
    def E_l(self) -> np.ndarray:
        return self.G_l.copy()

    def __eq__(self, other):
        if not isinstance(other, ConnectionState):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("A_b", "A_s", "G_b", "G_s", "G_l"))

    __hash__ = None


@dataclass(frozen=True)
class PlantState:
    x: np.ndarray
    k: int = 0


@dataclass(frozen=True)
class ControlPlan:
    """Default set-point sequence of one unit, indexed 0..N from ``origin_step``."""

    sequence: np.ndarray
    origin_step: int

    def __post_init__(self):
        object.__setattr__(self, "sequence", _vec(self.sequence, name="sequence").copy())

    @property
    def horizon(self) -> int:
        return self.sequence.shape[0] - 1

    def at(self, k: int) -> float:
        """Set-point this plan prescribes for absolute step ``k``."""
        t = k - self.origin_step
        if t < 0:
            raise ValueError(f"step {k} precedes plan origin {self.origin_step}")
        return float(self.sequence[min(t, self.horizon)])


@dataclass(frozen=True)
class LtiMatrices:
    B: np.ndarray
    F: np.ndarray
    C: np.ndarray
    D: np.ndarray
    delta: np.ndarray


def battery_setpoint(u_b, u_b_default, A_b) -> np.ndarray:
    """Set-point seen by each battery: the fresh command where the link is
    up, the stored default where it is down."""
    u = _vec(u_b, name="u_b")
    d = _vec(u_b_default, name="u_b_default")
    a = _mask(A_b, name="A_b")
    _same_length(u, d, a)
    return np.where(a, u, d)


def battery_power(u_hat_b, G_b) -> np.ndarray:
    u = _vec(u_hat_b, name="u_hat_b")
    g = _mask(G_b, name="G_b")
    _same_length(u, g)
    return np.where(g, u, 0.0)


def pv_power(u_hat_s, P_s_avail, G_s) -> np.ndarray:
    u = _vec(u_hat_s, name="u_hat_s")
    avail = _vec(P_s_avail, name="P_s_avail")
    g = _mask(G_s, name="G_s")
    _same_length(u, avail, g)
    if np.any(avail < 0):
        raise ValueError("available PV power must be nonnegative")
    return np.where(g, np.minimum(u, avail), 0.0)


def step_dynamics(x, P_b, omega, T_s: float) -> np.ndarray:
    x = _vec(x, name="x")
    p = _vec(P_b, name="P_b")
    w = _vec(omega, name="omega")
    _same_length(x, p, w)
    return x - T_s * (p + w)


def measure(x, upsilon, A_b) -> np.ndarray:
    x = _vec(x, name="x")
    v = _vec(upsilon, name="upsilon")
    a = _mask(A_b, name="A_b")
    _same_length(x, v, a)
    return np.where(a, x + v, 0.0)


def assemble_lti(cfg: SystemConfig, conn: ConnectionState, u_b_default) -> LtiMatrices:
    """Matrices of the estimation model x+ = x + B u + F w + delta, y = C x + D v."""
    d = _vec(u_b_default, cfg.n_b, "u_b_default")
    a = conn.A_b.astype(float)
    g = conn.G_b.astype(float)
    if a.shape[0] != cfg.n_b:
        raise ValueError("connection state does not match n_b")
    C = np.diag(a)
    return LtiMatrices(
        B=-cfg.T_s * np.diag(g * a),
        F=-cfg.T_s * np.eye(cfg.n_b),
        C=C,
        D=C.copy(),
        delta=-cfg.T_s * g * (1.0 - a) * d,
    )


def update_default_plan(plan: ControlPlan, new_sequence, k: int) -> ControlPlan:
    """Advance a unit's default plan to step ``k``.

    A freshly received sequence replaces the plan. Otherwise the stored
    sequence is shifted by ``t = k - origin_step`` and padded with its
    terminal value; a plan older than the horizon saturates at the terminal
    value.
    """
    if new_sequence is not None:
        seq = _vec(new_sequence, name="new_sequence")
        if seq.shape[0] != plan.sequence.shape[0]:
            raise ValueError(f"sequence length {seq.shape[0]} != N+1 = {plan.sequence.shape[0]}")
        return ControlPlan(seq, k)
    t = k - plan.origin_step
    if t < 0:
        raise ValueError(f"step {k} precedes plan origin {plan.origin_step}")
    N = plan.horizon
    idx = np.minimum(np.arange(N + 1) + t, N)
    return ControlPlan(plan.sequence[idx], k)


def power_balance_residual(P_s, P_b, P_g: float, P_l, conn: ConnectionState) -> float:
    P_s = _vec(P_s, conn.G_s.shape[0], "P_s")
    P_b = _vec(P_b, conn.G_b.shape[0], "P_b")
    P_l = _vec(P_l, conn.G_l.shape[0], "P_l")
    return float(conn.G_s @ P_s + conn.G_b @ P_b + P_g - conn.G_l @ P_l)
