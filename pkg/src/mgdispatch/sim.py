"""Discrete-time executor of the recursive dispatch loop.

Per step ``k`` (one-step-ahead scheme):

1. at the sampling instant the controller reads actual PV availability and
   load, computes the compensation ``sigma`` and sends set-points; units
   with a dead link apply their stored default plan instead;
2. the plant integrates the battery SoC with a bounded disturbance and the
   batteries report (masked, noisy) measurements;
3. between samples the controller runs the set-membership update for
   ``x_hat(k)`` and solves the MPC for steps ``k+1 .. k+1+N`` from the
   predicted ``x_hat(k+1|k)``.

The :class:`Controller` and :class:`LocalUnit` classes are shared with the
socket harness so that both executors produce identical traces.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import compensation as comp
from . import mpc
from .model import (ConnectionState, ControlPlan, SystemConfig, assemble_lti, battery_power,
                    measure, power_balance_residual, pv_power, step_dynamics,
                    update_default_plan)
from .profiles import Profiles
from .sme import (CERT_TOL, Ellipsoid, NoiseBounds, SetMembershipEstimator, contains)

logger = logging.getLogger(__name__)

UNIT_KINDS = ("battery", "pv", "load", "hub")
LAYERS = ("electrical", "communication", "both")


@dataclass(frozen=True)
class FaultEvent:
    """Fault on one unit (1-based ``unit`` number) over ``[start, end)`` hours.

    ``kind="hub"`` takes down the communication links of every unit relayed
    by that hub.
    """

    kind: str
    unit: int
    layer: str
    start: float
    end: float

    def __post_init__(self):
        if self.kind not in UNIT_KINDS:
            raise ValueError(f"unknown unit kind {self.kind!r}")
        if self.layer not in LAYERS:
            raise ValueError(f"unknown layer {self.layer!r}")
        if self.unit < 1:
            raise ValueError("unit numbers are 1-based")
        if not 0 <= self.start < self.end:
            raise ValueError("fault window must satisfy 0 <= start < end")
        if self.kind == "load" and self.layer != "electrical":
            raise ValueError("loads have no communication layer")
        if self.kind == "hub" and self.layer != "communication":
            raise ValueError("hub faults are communication faults")

    def active(self, t: float) -> bool:
        return self.start <= t + 1e-9 and t + 1e-9 < self.end

    @property
    def label(self) -> str:
        return f"{self.kind}{self.unit}:{self.layer}"


@dataclass(frozen=True)
class DisturbanceModel:
    kind: str = "uniform-box"
    omega_box: float = 0.1
    upsilon_box: float = 0.02

    def __post_init__(self):
        if self.kind not in ("none", "uniform-box", "boundary"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.omega_box < 0 or self.upsilon_box < 0:
            raise ValueError("box bounds must be nonnegative")


def hub_of(index: int, n_hubs: int) -> int:
    """Hub (0-based) relaying unit ``index`` (0-based)."""
    return index % n_hubs


@dataclass
class Scenario:
    config: SystemConfig
    profiles: Profiles
    mode: object = field(default_factory=mpc.Islanded)
    faults: tuple = ()
    disturbance: DisturbanceModel = field(default_factory=DisturbanceModel)
    seed: int = 0
    duration: float = 24.0
    compensation_enabled: bool = True
    pv_scale: tuple = (0.5, 1.0, 1.5)
    load_scale: tuple = (0.5, 1.0, 1.8)
    x0: tuple = (3.0, 4.0, 6.0)
    x_hat0: tuple = (3.1, 4.1, 5.8)
    conservative_soc: bool = False
    n_hubs: int | None = None
    name: str = "scenario"

    def __post_init__(self):
        cfg = self.config
        self.faults = tuple(self.faults)
        self.pv_scale = np.asarray(self.pv_scale, dtype=float)
        self.load_scale = np.asarray(self.load_scale, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        self.x_hat0 = np.asarray(self.x_hat0, dtype=float)
        if self.pv_scale.shape != (cfg.n_s,) or self.load_scale.shape != (cfg.n_l,):
            raise ValueError("pv_scale/load_scale must match n_s/n_l")
        if self.x0.shape != (cfg.n_b,) or self.x_hat0.shape != (cfg.n_b,):
            raise ValueError("x0/x_hat0 must have length n_b")
        if self.n_hubs is None:
            self.n_hubs = max(cfg.n_b, cfg.n_s, cfg.n_l)
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        self.profiles.check_grid(cfg.T_s, self.duration, cfg.N + 1)
        p = self.profiles
        if abs(p.pv_actual[0] - p.pv_forecast[0]) > 1e-12 or abs(p.load_actual[0] - p.load_forecast[0]) > 1e-12:
            raise ValueError("forecast and actual profiles must agree at t = 0")
        for f in self.faults:
            limit = {"battery": cfg.n_b, "pv": cfg.n_s, "load": cfg.n_l, "hub": self.n_hubs}[f.kind]
            if f.unit > limit:
                raise ValueError(f"fault refers to {f.kind} {f.unit}, only {limit} exist")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.config.T_s))

    def time(self, k: int) -> float:
        return k * self.config.T_s

    def pv_actual(self, k):
        return self.profiles.pv_actual[self.profiles.index(k)] * self.pv_scale

    def pv_forecast(self, k):
        return self.profiles.pv_forecast[self.profiles.index(k)] * self.pv_scale

    def load_actual(self, k):
        return self.profiles.load_actual[self.profiles.index(k)] * self.load_scale

    def load_forecast(self, k):
        return self.profiles.load_forecast[self.profiles.index(k)] * self.load_scale

    def forecast_window(self, k0: int, N: int):
        idx = np.arange(k0, k0 + N + 1)
        pv = np.outer(self.profiles.pv_forecast[idx], self.pv_scale)
        load = np.outer(self.profiles.load_forecast[idx], self.load_scale)
        return pv, load

    def connection(self, k: int) -> ConnectionState:
        cfg = self.config
        base = ConnectionState.healthy(cfg.n_b, cfg.n_s, cfg.n_l)
        return apply_faults(self.faults, self.time(k), base, self.n_hubs)


def apply_faults(faults, t: float, base: ConnectionState, n_hubs: int | None = None) -> ConnectionState:
    """Zero the connection entries of every fault active at time ``t``."""
    v = {name: getattr(base, name).copy() for name in ("A_b", "A_s", "G_b", "G_s", "G_l")}
    suffix = {"battery": "b", "pv": "s", "load": "l"}
    for f in faults:
        if not f.active(t):
            continue
        if f.kind == "hub":
            h = f.unit - 1
            hubs = n_hubs or max(len(v["A_b"]), len(v["A_s"]))
            for key in ("A_b", "A_s"):
                for i in range(len(v[key])):
                    if hub_of(i, hubs) == h:
                        v[key][i] = False
            continue
        i = f.unit - 1
        s = suffix[f.kind]
        if f.layer in ("electrical", "both"):
            v[f"G_{s}"][i] = False
        if f.layer in ("communication", "both"):
            v[f"A_{s}"][i] = False
    return ConnectionState(**v)


def _ellipsoid_sample(shape, box, kind, rng):
    n = shape.shape[0]
    Qi = np.linalg.inv(shape)
    if kind == "none":
        return np.zeros(n)
    if kind == "boundary":
        d = rng.standard_normal(n)
        while not np.any(d):
            d = rng.standard_normal(n)
        return d / np.sqrt(d @ Qi @ d)
    for _ in range(10_000):
        w = rng.uniform(-box, box, n)
        if w @ Qi @ w <= 1.0:
            return w
    raise RuntimeError("rejection sampling failed; box far larger than the ellipsoid")


def sample_disturbance(model: DisturbanceModel, bounds: NoiseBounds, rng) -> tuple[np.ndarray, np.ndarray]:
    """Process disturbance and measurement noise inside their ellipsoids."""
    omega = _ellipsoid_sample(bounds.Q, model.omega_box, model.kind, rng)
    upsilon = _ellipsoid_sample(bounds.R, model.upsilon_box, model.kind, rng)
    return omega, upsilon


def disturbance_sequence(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """All (omega, upsilon) draws of a run, in step order, from the scenario seed."""
    rng = np.random.default_rng(scenario.seed)
    bounds = NoiseBounds(scenario.config.Q, scenario.config.R)
    draws = [sample_disturbance(scenario.disturbance, bounds, rng) for _ in range(scenario.steps + 1)]
    return np.array([d[0] for d in draws]), np.array([d[1] for d in draws])


@dataclass
class TraceRecord:
    k: int
    t: float
    x: np.ndarray
    x_hat: np.ndarray
    P: np.ndarray
    y: np.ndarray
    P_s_avail: np.ndarray
    u_s: np.ndarray
    P_s: np.ndarray
    u_b: np.ndarray
    P_b: np.ndarray
    P_l: np.ndarray
    P_g_sched: float
    P_g: float
    sigma_hat: float
    sigma: float
    residual: float
    lmi_cert: float
    conn: ConnectionState
    contained: bool
    mpc_status: str = "optimal"
    sme_status: str = "initial"
    faults: tuple = ()
    sigma_saturated: bool = False
    plans_b: np.ndarray | None = field(default=None, repr=False)
    plans_s: np.ndarray | None = field(default=None, repr=False)

    @property
    def trace_P(self) -> float:
        return float(np.trace(self.P))


class LocalUnit:
    """Unit-side set-point logic: adopt a received sequence, else fall back
    to the shifted default plan."""

    def __init__(self, plan: ControlPlan):
        self.plan = plan

    def apply(self, k: int, sequence=None) -> float:
        self.plan = update_default_plan(self.plan, sequence, k)
        return float(self.plan.sequence[0])


@dataclass
class Dispatch:
    k: int
    u_s: np.ndarray
    u_b_hat: np.ndarray
    u_b: np.ndarray
    sigma_hat: float
    sigma: float
    saturated: bool
    P_g_sched: float
    sequences_s: dict
    sequences_b: dict
    plan_s: np.ndarray | None = field(default=None, repr=False)
    plan_b: np.ndarray | None = field(default=None, repr=False)


class Controller:
    """Central controller: compensation at the sampling instant, estimation
    and MPC between samples.

    It mirrors the default plan held by every unit so that the output of
    units without a link is known to the estimator and the MPC.
    """

    def __init__(self, scenario: Scenario, solver: str = "CLARABEL"):
        self.sc = scenario
        cfg = self.cfg = scenario.config
        self.solver = solver
        self.estimator = SetMembershipEstimator(Ellipsoid(scenario.x_hat0, cfg.P0),
                                                NoiseBounds(cfg.Q, cfg.R), solver=solver)
        self.x_pred = scenario.x_hat0.copy()
        conn0 = scenario.connection(0)
        us0 = np.zeros((cfg.N + 1, cfg.n_s))
        ub0 = np.zeros((cfg.N + 1, cfg.n_b))
        self.plan_u_s, self.plan_u_b, self.plan_P_g, self.mpc_status = self._solve_mpc(
            scenario.x_hat0, 0, conn0, us0, ub0, fallback=None)
        self.plan_conn = conn0
        self.plan_origin = 0
        self.mirror_s = [ControlPlan(self.plan_u_s[:, j], 0) for j in range(cfg.n_s)]
        self.mirror_b = [ControlPlan(self.plan_u_b[:, i], 0) for i in range(cfg.n_b)]
        self.last_sme = None
        self._prev = None  # (conn, u_b applied command, default battery values) of step k-1

    def initial_plans(self):
        return list(self.mirror_s), list(self.mirror_b)

    def _solve_mpc(self, x_hat, k0, conn, us_default, ub_default, fallback):
        cfg = self.cfg
        pv, load = self.sc.forecast_window(k0, cfg.N)
        try:
            prob = mpc.build_problem(x_hat, pv, load, conn, cfg, self.sc.mode, us_default, ub_default)
            sol = mpc.solve(prob, self.solver)
            self.plan_conn = conn
            return sol.u_s, sol.u_b, sol.P_g, sol.status
        except mpc.MpcInfeasible as exc:
            status = f"infeasible:{exc.constraint_class}"
        except Exception as exc:  # solver crash must not stop the loop
            status = f"error:{type(exc).__name__}"
        logger.warning("MPC at step %d failed (%s); holding previous plan", k0, status)
        if fallback is None:
            raise RuntimeError(f"initial MPC failed: {status}")
        return (*fallback, status)

    def dispatch(self, k: int, conn: ConnectionState, pv_avail, load) -> Dispatch:
        """Set-points for the sampling instant ``k``.

        ``pv_avail`` entries of unreachable PV units are ignored (they are
        masked out of the deviation estimate).
        """
        cfg, sc = self.cfg, self.sc
        t = k - self.plan_origin
        idx = np.minimum(np.arange(cfg.N + 1) + t, cfg.N)
        plan_s, plan_b, plan_g = self.plan_u_s[idx], self.plan_u_b[idx], self.plan_P_g[idx]
        default_s = np.array([m.at(k) for m in self.mirror_s])
        default_b = np.array([m.at(k) for m in self.mirror_b])
        u_s = np.where(conn.A_s, plan_s[0], default_s)
        u_b_hat = np.where(conn.A_b, plan_b[0], default_b)

        sig_hat, sig, saturated = 0.0, 0.0, False
        if sc.compensation_enabled:
            pv_fc = sc.pv_forecast(k)
            inp = comp.DeviationInput(
                u_hat_s=u_s, u_hat_b=u_b_hat,
                P_s_avail_actual=np.where(conn.A_s, pv_avail, pv_fc), P_s_avail_forecast=pv_fc,
                P_l_actual=load, P_l_forecast=sc.load_forecast(k), x_hat=self.x_pred,
                eff_b=conn.E_b, eff_s=conn.E_s, eff_l=conn.E_l)
            try:
                sig_hat = comp.sigma_hat(inp, cfg.lambda_b)
                lost = self._topology_shortfall(conn, u_s, u_b_hat, pv_fc, inp.P_l_forecast)
                sig_hat += lost / float(conn.E_b @ cfg.lambda_b)
                margin = None
                if sc.conservative_soc:
                    P = self.estimator.estimate.shape
                    margin = np.sqrt(np.diag(P)) + cfg.T_s * np.sqrt(np.diag(cfg.Q))
                sig, ok = comp.feasible_sigma(sig_hat, u_b_hat, self.x_pred, cfg, conn.E_b,
                                              cfg.lambda_b, margin)
                saturated = (not ok) or abs(sig - sig_hat) > 1e-12
            except comp.NoCompensatorAvailable:
                logger.warning("step %d: no battery reachable for compensation", k)
                sig_hat, sig, saturated = float("nan"), 0.0, True
        u_b = comp.compensate(u_b_hat, sig, conn.E_b, cfg.lambda_b)

        seq_s, seq_b = {}, {}
        for j in range(cfg.n_s):
            if conn.A_s[j]:
                seq_s[j] = plan_s[:, j].copy()
                self.mirror_s[j] = ControlPlan(seq_s[j], k)
            else:
                self.mirror_s[j] = update_default_plan(self.mirror_s[j], None, k)
        for i in range(cfg.n_b):
            if conn.A_b[i]:
                s = plan_b[:, i].copy()
                s[0] = u_b[i]
                seq_b[i] = s
                self.mirror_b[i] = ControlPlan(s, k)
            else:
                self.mirror_b[i] = update_default_plan(self.mirror_b[i], None, k)
        self._dispatch_state = (conn, u_b, default_b)
        return Dispatch(k, u_s, u_b_hat, u_b, sig_hat, sig, saturated, float(plan_g[0]), seq_s, seq_b,
                        plan_s, plan_b)

    def _topology_shortfall(self, conn, u_s, u_b_hat, pv_fc, load_fc) -> float:
        """Power the plan counted on but lost to electrical switching since it was made."""
        pc = self.plan_conn
        d_b = pc.G_b.astype(float) - conn.G_b
        d_s = pc.G_s.astype(float) - conn.G_s
        d_l = pc.G_l.astype(float) - conn.G_l
        return float(d_b @ u_b_hat + d_s @ np.minimum(u_s, pv_fc) - d_l @ load_fc)

    def observe_and_plan(self, k: int, conn: ConnectionState, y):
        """Estimation for step ``k`` and MPC for steps ``k+1 ..``.

        Returns ``(estimate, sme_solution_or_None, mpc_status)``.
        """
        cfg = self.cfg
        conn_k, u_b_k, default_b_k = self._dispatch_state
        sol = None
        if self._prev is not None:
            conn_p, u_p, dflt_p = self._prev
            lti_prev = assemble_lti(cfg, conn_p, dflt_p)
            lti_now = assemble_lti(cfg, conn, np.zeros(cfg.n_b))
            sol = self.estimator.step(lti_prev, u_p, lti_now, y, k)
        self.last_sme = sol
        self._prev = (conn_k, u_b_k, default_b_k)

        est = self.estimator.estimate
        lti_k = assemble_lti(cfg, conn_k, default_b_k)
        self.x_pred = est.center + lti_k.B @ u_b_k + lti_k.delta

        # defaults the unreachable units will follow over the next horizon
        us_d = np.column_stack([update_default_plan(m, None, k + 1).sequence for m in self.mirror_s])
        ub_d = np.column_stack([update_default_plan(m, None, k + 1).sequence for m in self.mirror_b])
        t = k + 1 - self.plan_origin
        idx = np.minimum(np.arange(cfg.N + 1) + t, cfg.N)
        held = (self.plan_u_s[idx], self.plan_u_b[idx], self.plan_P_g[idx])
        self.plan_u_s, self.plan_u_b, self.plan_P_g, status = self._solve_mpc(
            self.x_pred, k + 1, conn_k, us_d, ub_d, fallback=held)
        self.plan_origin = k + 1
        self.mpc_status = status
        return est, sol, status


def run(scenario: Scenario, solver: str = "CLARABEL") -> list[TraceRecord]:
    """Simulate ``scenario`` in process and return one record per step."""
    cfg = scenario.config
    omegas, upsilons = disturbance_sequence(scenario)
    ctrl = Controller(scenario, solver)
    plans_s, plans_b = ctrl.initial_plans()
    pv_units = [LocalUnit(p) for p in plans_s]
    bat_units = [LocalUnit(p) for p in plans_b]
    x = scenario.x0.copy()
    trace = []
    for k in range(scenario.steps):
        conn = scenario.connection(k)
        pa = scenario.pv_actual(k)
        pl = scenario.load_actual(k)
        y = measure(x, upsilons[k], conn.A_b)

        d = ctrl.dispatch(k, conn, np.where(conn.A_s, pa, 0.0), pl)
        u_s = np.array([u.apply(k, d.sequences_s.get(j)) for j, u in enumerate(pv_units)])
        u_b = np.array([u.apply(k, d.sequences_b.get(i)) for i, u in enumerate(bat_units)])
        rec = plant_step(scenario, k, x, conn, pa, pl, u_s, u_b, y, d)
        x_next = step_dynamics(x, rec.P_b, omegas[k], cfg.T_s)

        est, sol, status = ctrl.observe_and_plan(k, conn, y)
        finish_record(rec, est, sol, status)
        rec.plans_b = np.array([u.plan.sequence for u in bat_units])
        rec.plans_s = np.array([u.plan.sequence for u in pv_units])
        trace.append(rec)
        x = x_next
    return trace


def plant_step(scenario, k, x, conn, pa, pl, u_s, u_b, y, d: Dispatch) -> TraceRecord:
    """Electrical side of one step: masked powers and balance residual."""
    P_b = battery_power(u_b, conn.G_b)
    P_s = pv_power(u_s, pa, conn.G_s)
    residual = power_balance_residual(P_s, P_b, d.P_g_sched, pl, conn)
    return TraceRecord(
        k=k, t=scenario.time(k), x=x.copy(), x_hat=None, P=None, y=y,
        P_s_avail=np.asarray(pa, float), u_s=u_s, P_s=P_s, u_b=u_b, P_b=P_b,
        P_l=np.where(conn.G_l, pl, 0.0), P_g_sched=d.P_g_sched, P_g=d.P_g_sched - residual,
        sigma_hat=d.sigma_hat, sigma=d.sigma, residual=residual, lmi_cert=float("nan"),
        conn=conn, contained=False,
        faults=tuple(f.label for f in scenario.faults if f.active(scenario.time(k))),
        sigma_saturated=d.saturated,
    )


def finish_record(rec: TraceRecord, est: Ellipsoid, sol, mpc_status: str) -> None:
    rec.x_hat = est.center.copy()
    rec.P = est.shape.copy()
    rec.contained = contains(est, rec.x)
    if sol is not None:
        rec.lmi_cert = sol.certificate
        rec.sme_status = sol.status
    rec.mpc_status = mpc_status


# ---------------------------------------------------------------- trace files

def trace_columns(n_b: int, n_s: int, n_l: int) -> list[str]:
    b = range(1, n_b + 1)
    s = range(1, n_s + 1)
    l = range(1, n_l + 1)
    cols = ["k", "t_h"]
    cols += [f"x_{i}" for i in b] + [f"xhat_{i}" for i in b]
    cols += [f"P_{i}_{j}" for i in b for j in b] + ["trace_P"]
    cols += [f"y_{i}" for i in b]
    cols += [f"pa_{j}" for j in s] + [f"us_{j}" for j in s] + [f"Ps_{j}" for j in s]
    cols += [f"ub_{i}" for i in b] + [f"Pb_{i}" for i in b]
    cols += [f"Pl_{m}" for m in l]
    cols += ["Pg_sched", "Pg", "sigma_hat", "sigma", "sigma_saturated", "residual", "lmi_cert"]
    cols += [f"A_b_{i}" for i in b] + [f"G_b_{i}" for i in b]
    cols += [f"A_s_{j}" for j in s] + [f"G_s_{j}" for j in s] + [f"G_l_{m}" for m in l]
    cols += ["contained", "mpc_status", "sme_status", "faults"]
    return cols


TEXT_COLUMNS = ("mpc_status", "sme_status", "faults")


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def record_row(r: TraceRecord) -> list[str]:
    f = _fmt
    row = [str(r.k), f(r.t)]
    row += [f(v) for v in r.x] + [f(v) for v in r.x_hat]
    row += [f(v) for v in r.P.ravel()] + [f(r.trace_P)]
    row += [f(v) for v in r.y]
    row += [f(v) for v in r.P_s_avail] + [f(v) for v in r.u_s] + [f(v) for v in r.P_s]
    row += [f(v) for v in r.u_b] + [f(v) for v in r.P_b]
    row += [f(v) for v in r.P_l]
    row += [f(r.P_g_sched), f(r.P_g), f(r.sigma_hat), f(r.sigma), str(int(r.sigma_saturated)),
            f(r.residual), f(r.lmi_cert)]
    c = r.conn
    row += [str(int(v)) for v in c.A_b] + [str(int(v)) for v in c.G_b]
    row += [str(int(v)) for v in c.A_s] + [str(int(v)) for v in c.G_s] + [str(int(v)) for v in c.G_l]
    row += [str(int(r.contained)), r.mpc_status, r.sme_status, ";".join(r.faults)]
    return row


def write_trace_csv(trace: list[TraceRecord], path, scenario: Scenario | None = None) -> None:
    """Write the trace CSV (and, with ``scenario``, the ``.meta.json`` sidecar
    holding the limits needed by :func:`verify_trace`)."""
    if not trace:
        raise ValueError("empty trace")
    r0 = trace[0]
    cols = trace_columns(r0.x.size, r0.u_s.size, r0.P_l.size)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in trace:
            w.writerow(record_row(r))
    if scenario is not None:
        Path(str(path) + ".meta.json").write_text(json.dumps(trace_meta(scenario), indent=2, sort_keys=True))


def trace_meta(scenario: Scenario) -> dict:
    cfg = scenario.config
    limits = {k: np.asarray(getattr(cfg, k)).tolist() for k in
              ("P_s_min", "P_s_max", "P_b_min", "P_b_max", "x_min", "x_max")}
    return {"format": "mgdispatch-trace", "version": 1, "n_b": cfg.n_b, "n_s": cfg.n_s,
            "n_l": cfg.n_l, "T_s": cfg.T_s, "limits": limits, "scenario": scenario.name}


class TraceFormatError(ValueError):
    pass


def read_trace_csv(path) -> tuple[list[TraceRecord], dict | None]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TraceFormatError(f"{path}: empty trace file")
    header, body = rows[0], rows[1:]
    try:
        n_b = sum(1 for h in header if h.startswith("x_") and h[2:].isdigit())
        n_s = sum(1 for h in header if h.startswith("pa_"))
        n_l = sum(1 for h in header if h.startswith("Pl_"))
    except Exception as exc:  # pragma: no cover
        raise TraceFormatError(str(exc)) from exc
    expected = trace_columns(n_b, n_s, n_l) if n_b and n_s and n_l else None
    if header != expected:
        raise TraceFormatError(f"{path}: header does not match the trace schema")
    if not body:
        raise TraceFormatError(f"{path}: trace has no rows")
    col = {h: i for i, h in enumerate(header)}
    trace = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise TraceFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            g = lambda name: float(row[col[name]])
            vec = lambda prefix, n: np.array([g(f"{prefix}_{i}") for i in range(1, n + 1)])
            bits = lambda prefix, n: np.array([int(row[col[f"{prefix}_{i}"]]) for i in range(1, n + 1)], bool)
            P = np.array([[g(f"P_{i}_{j}") for j in range(1, n_b + 1)] for i in range(1, n_b + 1)])
            conn = ConnectionState(bits("A_b", n_b), bits("A_s", n_s), bits("G_b", n_b),
                                   bits("G_s", n_s), bits("G_l", n_l))
            faults = tuple(s for s in row[col["faults"]].split(";") if s)
            trace.append(TraceRecord(
                k=int(row[col["k"]]), t=g("t_h"), x=vec("x", n_b), x_hat=vec("xhat", n_b), P=P,
                y=vec("y", n_b), P_s_avail=vec("pa", n_s), u_s=vec("us", n_s), P_s=vec("Ps", n_s),
                u_b=vec("ub", n_b), P_b=vec("Pb", n_b), P_l=vec("Pl", n_l),
                P_g_sched=g("Pg_sched"), P_g=g("Pg"), sigma_hat=g("sigma_hat"), sigma=g("sigma"),
                residual=g("residual"), lmi_cert=g("lmi_cert"), conn=conn,
                contained=bool(int(row[col["contained"]])), mpc_status=row[col["mpc_status"]],
                sme_status=row[col["sme_status"]], faults=faults,
                sigma_saturated=bool(int(row[col["sigma_saturated"]]))))
        except (ValueError, KeyError) as exc:
            raise TraceFormatError(f"{path}:{lineno}: {exc}") from None
    meta_path = Path(str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
    return trace, meta


# ---------------------------------------------------------------- verification

@dataclass
class VerificationReport:
    steps: int
    max_abs_residual: float
    containment_violations: int
    limit_violations: dict
    certificate_failures: int
    certificate_max: float
    sigma_stats: dict
    mpc_fallbacks: int
    limits_checked: bool = True
    violation_steps: list = field(default_factory=list)

    @property
    def violations(self) -> int:
        return self.containment_violations + sum(self.limit_violations.values()) + self.certificate_failures

    def summary(self) -> str:
        lines = [
            f"steps                    {self.steps}",
            f"max |balance residual|   {self.max_abs_residual:.3e} pu",
            f"containment violations   {self.containment_violations}",
            f"limit violations         {sum(self.limit_violations.values())} {self.limit_violations}"
            + ("" if self.limits_checked else " (limits unavailable, not checked)"),
            f"SME certificate failures {self.certificate_failures} (max eig {self.certificate_max:.3e})",
            f"MPC fallbacks            {self.mpc_fallbacks}",
            "sigma                    " + ", ".join(f"{k}={v:.4g}" for k, v in self.sigma_stats.items()),
            f"total violations         {self.violations}",
        ]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["violations"] = self.violations
        return d


def verify_trace(trace: list[TraceRecord], limits: dict | SystemConfig | None = None,
                 contain_tol: float = 1e-9, limit_tol: float = 1e-6) -> VerificationReport:
    """Recompute invariants from logged values alone.

    Containment is recomputed from ``x``, ``x_hat`` and ``P`` (the logged
    flag is not trusted); limit checks need ``limits`` (a config or the
    ``limits`` block of the trace sidecar).
    """
    if not trace:
        raise ValueError("empty trace")
    if isinstance(limits, SystemConfig):
        limits = {k: np.asarray(getattr(limits, k)) for k in
                  ("P_s_min", "P_s_max", "P_b_min", "P_b_max", "x_min", "x_max")}
    elif limits is not None:
        limits = {k: np.asarray(v, dtype=float) for k, v in limits.items()}
    lim_counts = {"battery_power": 0, "pv_power": 0, "soc": 0}
    containment = 0
    cert_fail = 0
    cert_max = -np.inf
    bad_steps = []
    for r in trace:
        bad = False
        d = r.x - r.x_hat
        try:
            q = float(d @ np.linalg.solve(r.P, d))
        except np.linalg.LinAlgError:
            q = np.inf
        if not q <= 1.0 + contain_tol:
            containment += 1
            bad = True
        if np.isfinite(r.lmi_cert):
            cert_max = max(cert_max, r.lmi_cert)
            if r.lmi_cert > CERT_TOL:
                cert_fail += 1
                bad = True
        if limits is not None:
            if np.any(r.P_b < limits["P_b_min"] - limit_tol) or np.any(r.P_b > limits["P_b_max"] + limit_tol):
                lim_counts["battery_power"] += 1
                bad = True
            Ps_lo = np.where(r.conn.G_s, limits["P_s_min"], 0.0)
            if np.any(r.P_s < Ps_lo - limit_tol) or np.any(r.P_s > limits["P_s_max"] + limit_tol):
                lim_counts["pv_power"] += 1
                bad = True
            if np.any(r.x < limits["x_min"] - limit_tol) or np.any(r.x > limits["x_max"] + limit_tol):
                lim_counts["soc"] += 1
                bad = True
        if bad:
            bad_steps.append(r.k)
    sig = np.array([r.sigma for r in trace])
    sigma_stats = {
        "min": float(sig.min()), "max": float(sig.max()), "mean": float(sig.mean()),
        "nonzero": float(np.count_nonzero(np.abs(sig) > 1e-12)),
        "saturated": float(sum(r.sigma_saturated for r in trace)),
    }
    return VerificationReport(
        steps=len(trace),
        max_abs_residual=float(max(abs(r.residual) for r in trace)),
        containment_violations=containment,
        limit_violations=lim_counts,
        certificate_failures=cert_fail,
        certificate_max=float(cert_max) if np.isfinite(cert_max) else float("nan"),
        sigma_stats=sigma_stats,
        mpc_fallbacks=sum(1 for r in trace if r.mpc_status not in ("optimal", "relaxed")),
        limits_checked=limits is not None,
        violation_steps=bad_steps,
    )
