"""Horizon-N power dispatch QP.

Decision variables are the PV and battery set-points of the units the
controller can reach and the utility-grid power.  Units whose link is down
are pinned to their default plan and batteries that are electrically
disconnected are removed from the problem (or, with ``eliminate=False``,
kept and constrained to zero power).

Sign conventions: battery power is positive when discharging (the SoC
integrator is ``x+ = x - T_s P_b``); grid power is positive when the utility
supplies the microgrids.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .model import ConnectionState, ControlPlan, SystemConfig

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-6
RELAX_PENALTY = 1e4


@dataclass(frozen=True)
class Islanded:
    pass


@dataclass(frozen=True)
class GridVariable:
    pass


@dataclass(frozen=True)
class GridFixed:
    value: float

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("fixed grid power must be finite")


GridMode = Islanded | GridVariable | GridFixed


class MpcInfeasible(RuntimeError):
    def __init__(self, constraint_class: str, detail: str = ""):
        self.constraint_class = constraint_class
        super().__init__(f"MPC infeasible ({constraint_class}){': ' + detail if detail else ''}")


@dataclass
class MpcProblem:
    """Data of one receding-horizon problem plus its compiled QP.

    ``u_s_default``/``u_b_default`` hold, per horizon step, the values a
    unit without a communication link will apply on its own.
    """

    cfg: SystemConfig
    x_hat: np.ndarray
    pv_forecast: np.ndarray
    load_forecast: np.ndarray
    conn: ConnectionState
    mode: object
    u_s_default: np.ndarray
    u_b_default: np.ndarray
    eliminate: bool = True
    relaxed: bool = False
    _qp: dict = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.pv_forecast.shape[0] - 1


@dataclass
class MpcSolution:
    u_s: np.ndarray
    u_b: np.ndarray
    P_s: np.ndarray
    P_b: np.ndarray
    P_g: np.ndarray
    x: np.ndarray
    x0: np.ndarray
    objective: float
    relaxation_penalty: float = 0.0
    relaxed: bool = False
    status: str = "optimal"

    @property
    def N(self) -> int:
        return self.u_s.shape[0] - 1


def _horizon_array(a, N: int, n: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 and n == 1 and a.shape[0] == N + 1:
        a = a[:, None]
    if a.shape != (N + 1, n):
        raise ValueError(f"{name} must have shape {(N + 1, n)}, got {a.shape}")
    return a


def build_problem(x_hat, pv_forecast, load_forecast, conn: ConnectionState, cfg: SystemConfig,
                  mode=Islanded(), u_s_default=None, u_b_default=None, *,
                  horizon: int | None = None, eliminate: bool = True,
                  relaxed: bool = False) -> MpcProblem:
    """Assemble the dispatch QP.

    ``pv_forecast`` has shape (N+1, n_s) and ``load_forecast`` (N+1, n_l);
    ``horizon`` defaults to ``cfg.N`` but ``0`` (single step) is allowed.
    The connection state is held constant over the horizon.
    """
    N = cfg.N if horizon is None else int(horizon)
    if N < 0:
        raise ValueError("horizon must be >= 0")
    x_hat = np.asarray(x_hat, dtype=float).reshape(-1)
    if x_hat.shape[0] != cfg.n_b:
        raise ValueError("x_hat length must equal n_b")
    pv = _horizon_array(pv_forecast, N, cfg.n_s, "pv_forecast")
    load = _horizon_array(load_forecast, N, cfg.n_l, "load_forecast")
    if np.any(pv < 0) or np.any(load < 0):
        raise ValueError("forecasts must be nonnegative")
    us_d = np.zeros((N + 1, cfg.n_s)) if u_s_default is None else _horizon_array(u_s_default, N, cfg.n_s, "u_s_default")
    ub_d = np.zeros((N + 1, cfg.n_b)) if u_b_default is None else _horizon_array(u_b_default, N, cfg.n_b, "u_b_default")
    if np.any(x_hat < cfg.x_min) or np.any(x_hat > cfg.x_max):
        logger.info("state estimate outside hard SoC limits; relaxing SoC bounds")
        relaxed = True
    prob = MpcProblem(cfg, x_hat, pv, load, conn, mode, us_d, ub_d, eliminate, relaxed)
    prob._qp = _compile(prob)
    return prob


def _compile(prob: MpcProblem) -> dict:
    cfg, N, conn = prob.cfg, prob.N, prob.conn
    T = N + 1
    Gs, Gb, Gl = (conn.G_s.astype(float), conn.G_b.astype(float), conn.G_l.astype(float))

    # PV: free where reachable and connected, pinned to the default where unreachable
    free_s = np.flatnonzero(conn.A_s & conn.G_s)
    us_fixed = np.where(conn.A_s, 0.0, prob.u_s_default)
    Ps_fixed = Gs * np.where(conn.A_s, 0.0, np.minimum(prob.u_s_default, prob.pv_forecast))
    u_s_var = cp.Variable((T, free_s.size)) if free_s.size else None

    # batteries: unreachable ones follow their default; disconnected reachable ones are eliminated
    reach_b = conn.A_b
    if prob.eliminate:
        free_b = np.flatnonzero(reach_b & conn.G_b)
    else:
        free_b = np.flatnonzero(reach_b)
    ub_fixed = np.where(reach_b, 0.0, prob.u_b_default)
    u_b_var = cp.Variable((T, free_b.size)) if free_b.size else None

    def scatter(var, idx, n, fixed):
        if var is None:
            return cp.Constant(fixed)
        S = np.zeros((idx.size, n))
        S[np.arange(idx.size), idx] = 1.0
        return var @ S + fixed

    U_s = scatter(u_s_var, free_s, cfg.n_s, us_fixed)
    U_b = scatter(u_b_var, free_b, cfg.n_b, ub_fixed)
    P_s = scatter(u_s_var, free_s, cfg.n_s, Ps_fixed)
    P_b = cp.multiply(U_b, np.tile(Gb, (T, 1)))

    cons = []
    if u_s_var is not None:
        cap = np.minimum(cfg.P_s_max[free_s], prob.pv_forecast[:, free_s])
        cons += [u_s_var >= np.tile(cfg.P_s_min[free_s], (T, 1)),
                 u_s_var <= cap]
    if u_b_var is not None:
        cons += [u_b_var >= np.tile(cfg.P_b_min[free_b], (T, 1)),
                 u_b_var <= np.tile(cfg.P_b_max[free_b], (T, 1))]
        if not prob.eliminate:
            dead = np.flatnonzero(~conn.G_b[free_b])
            if dead.size:
                cons.append(u_b_var[:, dead] == 0)

    mode = prob.mode
    if isinstance(mode, GridVariable):
        P_g = cp.Variable(T)
    elif isinstance(mode, GridFixed):
        P_g = cp.Constant(np.full(T, float(mode.value)))
    else:
        P_g = cp.Constant(np.zeros(T))

    supply = cp.sum(P_s, axis=1) + cp.sum(P_b, axis=1) + P_g
    demand = prob.load_forecast @ Gl
    cons.append(supply == demand)

    # post-step SoC: x[n] = x_hat - T_s * sum_{m<=n} P_b[m]
    lower_tri = np.tril(np.ones((T, T)))
    X = np.tile(prob.x_hat, (T, 1)) - cfg.T_s * (lower_tri @ P_b)
    s_lo = cp.Variable((T, cfg.n_b), nonneg=True)
    s_hi = cp.Variable((T, cfg.n_b), nonneg=True)
    cons += [s_lo >= np.tile(cfg.x_b_min, (T, 1)) - X, s_hi >= X - np.tile(cfg.x_b_max, (T, 1))]
    relax = None
    if prob.relaxed:
        relax = cp.Variable((T, cfg.n_b), nonneg=True)
        cons += [X >= np.tile(cfg.x_min, (T, 1)) - relax, X <= np.tile(cfg.x_max, (T, 1)) + relax]
    else:
        cons += [X >= np.tile(cfg.x_min, (T, 1)), X <= np.tile(cfg.x_max, (T, 1))]

    W1 = np.tile(cfg.C_b1, (T, 1))
    W2 = np.tile(cfg.C_b2, (T, 1))
    cost = (-cp.sum(P_s @ cfg.C_s)
            + cp.sum(cp.multiply(W1, cp.square(P_b)))
            + cp.sum(cp.multiply(W2, cp.square(s_lo))) + cp.sum(cp.multiply(W2, cp.square(s_hi)))
            + cfg.C_g1 * cp.sum_squares(P_g) + cfg.C_g2 * cp.sum(P_g))
    penalty = RELAX_PENALTY * cp.sum(relax) if relax is not None else cp.Constant(0.0)
    problem = cp.Problem(cp.Minimize(cost + penalty), cons)
    return dict(problem=problem, U_s=U_s, U_b=U_b, P_s=P_s, P_b=P_b, P_g=P_g, X=X,
                penalty=penalty, free_s=free_s, free_b=free_b)


def evaluate_cost(sol: MpcSolution, cfg: SystemConfig) -> float:
    """Horizon cost computed directly from the dispatch, with the max-based
    soft-SoC penalty (no slack variables)."""
    dx = np.maximum(cfg.x_b_min - sol.x, 0.0) + np.maximum(sol.x - cfg.x_b_max, 0.0)
    P_g = np.asarray(sol.P_g, dtype=float)
    return float(-np.sum(sol.P_s @ cfg.C_s)
                 + np.sum(cfg.C_b1 * sol.P_b ** 2)
                 + np.sum(cfg.C_b2 * dx ** 2)
                 + cfg.C_g1 * np.sum(P_g ** 2) + cfg.C_g2 * np.sum(P_g))


def _diagnose(prob: MpcProblem) -> str:
    cfg, conn = prob.cfg, prob.conn
    lo_s = np.where(conn.A_s & conn.G_s, cfg.P_s_min, 0.0)
    hi_s = np.where(conn.A_s & conn.G_s, np.minimum(cfg.P_s_max, prob.pv_forecast), 0.0)
    fixed_s = np.where(conn.A_s, 0.0, conn.G_s * np.minimum(prob.u_s_default, prob.pv_forecast))
    free_b = conn.A_b & conn.G_b
    lo_b = np.where(free_b, cfg.P_b_min, 0.0) + np.where(conn.A_b, 0.0, conn.G_b * prob.u_b_default)
    hi_b = np.where(free_b, cfg.P_b_max, 0.0) + np.where(conn.A_b, 0.0, conn.G_b * prob.u_b_default)
    demand = prob.load_forecast @ conn.G_l
    if isinstance(prob.mode, GridVariable):
        return "state of charge limits"
    pg = prob.mode.value if isinstance(prob.mode, GridFixed) else 0.0
    T = prob.pv_forecast.shape[0]
    total = lambda *parts: sum(np.broadcast_to(p, (T, np.shape(p)[-1])).sum(1) for p in parts)
    lo = total(lo_s, fixed_s, lo_b) + pg
    hi = total(hi_s, fixed_s, hi_b) + pg
    if np.any(demand < lo - FEAS_TOL) or np.any(demand > hi + FEAS_TOL):
        return "power balance"
    return "state of charge limits"


def solve(prob: MpcProblem, solver: str = "CLARABEL") -> MpcSolution:
    """Solve the QP; on infeasibility retry once with relaxed SoC bounds."""
    qp = prob._qp
    try:
        qp["problem"].solve(solver=solver)
        status = qp["problem"].status
    except cp.error.SolverError as exc:
        status = f"solver_error: {exc}"
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        if not prob.relaxed:
            logger.info("MPC status %s; retrying with relaxed SoC bounds", status)
            relaxed = MpcProblem(prob.cfg, prob.x_hat, prob.pv_forecast, prob.load_forecast,
                                 prob.conn, prob.mode, prob.u_s_default, prob.u_b_default,
                                 prob.eliminate, True)
            relaxed._qp = _compile(relaxed)
            return solve(relaxed, solver)
        raise MpcInfeasible(_diagnose(prob), f"solver status {status}")

    def val(e):
        return np.asarray(e.value, dtype=float)

    P_g = val(qp["P_g"]).reshape(-1)
    penalty = float(qp["penalty"].value)
    return MpcSolution(
        u_s=val(qp["U_s"]), u_b=val(qp["U_b"]), P_s=val(qp["P_s"]), P_b=val(qp["P_b"]),
        P_g=P_g, x=val(qp["X"]), x0=prob.x_hat.copy(),
        objective=float(qp["problem"].value), relaxation_penalty=penalty,
        relaxed=prob.relaxed, status="relaxed" if prob.relaxed else "optimal",
    )


def extract_plan(sol: MpcSolution, origin_step: int) -> dict:
    """Per-unit default plans from a solution: ``{"pv": [...], "battery": [...]}``.

    Eliminated (disconnected) batteries get an all-zero plan.
    """
    return {
        "pv": [ControlPlan(sol.u_s[:, j], origin_step) for j in range(sol.u_s.shape[1])],
        "battery": [ControlPlan(sol.u_b[:, i], origin_step) for i in range(sol.u_b.shape[1])],
    }


def export_triplets(prob: MpcProblem, path) -> None:
    """Write the QP in canonical form as sparse ``i j value`` triplets.

    Sections ``P`` (objective Hessian), ``q``, ``A`` (constraint matrix) and
    ``b`` are introduced by a ``# name rows cols`` line.
    """
    data, _, _ = prob._qp["problem"].get_problem_data(cp.CLARABEL)
    with open(path, "w") as fh:
        for name in ("P", "q", "A", "b"):
            M = data.get(name)
            if M is None:
                continue
            if hasattr(M, "tocoo"):
                C = M.tocoo()
                fh.write(f"# {name} {C.shape[0]} {C.shape[1]}\n")
                for i, j, v in zip(C.row, C.col, C.data):
                    fh.write(f"{i} {j} {v:.17g}\n")
            else:
                v = np.asarray(M).reshape(-1)
                fh.write(f"# {name} {v.size} 1\n")
                for i, x in enumerate(v):
                    if x != 0:
                        fh.write(f"{i} 0 {x:.17g}\n")
