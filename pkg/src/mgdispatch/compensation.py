"""One-step-ahead deviation compensation.

At the sampling instant the controller knows the actual PV availability and
load demand.  Their deviation from the forecasts used to plan this step is
redistributed over the reachable batteries as ``u_b* = u_b + diag(E_b)
lambda_b sigma``, with ``sigma`` clamped so that every compensated battery
stays within its power and SoC limits.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import SystemConfig, _mask, _same_length, _vec

logger = logging.getLogger(__name__)


class NoCompensatorAvailable(ValueError):
    """No reachable battery with a positive coefficient remains."""


@dataclass
class DeviationInput:
    u_hat_s: np.ndarray
    u_hat_b: np.ndarray
    P_s_avail_actual: np.ndarray
    P_s_avail_forecast: np.ndarray
    P_l_actual: np.ndarray
    P_l_forecast: np.ndarray
    x_hat: np.ndarray
    eff_b: np.ndarray
    eff_s: np.ndarray
    eff_l: np.ndarray

    def __post_init__(self):
        for name in ("u_hat_s", "u_hat_b", "P_s_avail_actual", "P_s_avail_forecast",
                     "P_l_actual", "P_l_forecast", "x_hat"):
            setattr(self, name, _vec(getattr(self, name), name=name))
        for name in ("eff_b", "eff_s", "eff_l"):
            setattr(self, name, _mask(getattr(self, name), name=name))
        _same_length(self.u_hat_s, self.P_s_avail_actual, self.P_s_avail_forecast, self.eff_s)
        _same_length(self.u_hat_b, self.x_hat, self.eff_b)
        _same_length(self.P_l_actual, self.P_l_forecast, self.eff_l)


def effective_connection(A, G) -> np.ndarray:
    a = _mask(A, name="A")
    g = _mask(G, name="G")
    _same_length(a, g)
    return a & g


def deviations(inp: DeviationInput) -> tuple[np.ndarray, np.ndarray]:
    """PV shortfall against the forecast and load excess over the forecast."""
    dPs = np.minimum(inp.u_hat_s, inp.P_s_avail_forecast) - np.minimum(inp.u_hat_s, inp.P_s_avail_actual)
    dPl = inp.P_l_actual - inp.P_l_forecast
    return dPs, dPl


def sigma_hat(inp: DeviationInput, lambda_b) -> float:
    lam = _vec(lambda_b, inp.eff_b.shape[0], "lambda_b")
    denom = float(inp.eff_b @ lam)
    if denom <= 0:
        raise NoCompensatorAvailable("no reachable battery can absorb the deviation")
    dPs, dPl = deviations(inp)
    return float(inp.eff_s @ dPs + inp.eff_l @ dPl) / denom


def sigma_interval(u_hat_b, x_hat, cfg: SystemConfig, eff_b, lambda_b, margin=None):
    """Closed interval ``[lo, hi]`` of sigma keeping every compensated battery feasible.

    Returns ``None`` when the uncompensated set-points already violate a
    limit that sigma cannot repair.  ``margin`` shrinks the SoC limits
    per battery (e.g. by the estimation ellipsoid's axis radius).
    """
    u = _vec(u_hat_b, cfg.n_b, "u_hat_b")
    x = _vec(x_hat, cfg.n_b, "x_hat")
    e = _mask(eff_b, cfg.n_b, "eff_b")
    lam = _vec(lambda_b, cfg.n_b, "lambda_b")
    m = np.zeros(cfg.n_b) if margin is None else _vec(margin, cfg.n_b, "margin")
    lo, hi = -np.inf, np.inf
    tol = 1e-9
    for i in np.flatnonzero(e):
        # P_b_min <= u + lam*s <= P_b_max and x_min <= x - T_s(u + lam*s) <= x_max
        p_lo = max(cfg.P_b_min[i], (x[i] - (cfg.x_max[i] - m[i])) / cfg.T_s)
        p_hi = min(cfg.P_b_max[i], (x[i] - (cfg.x_min[i] + m[i])) / cfg.T_s)
        if lam[i] == 0:
            if not (p_lo - tol <= u[i] <= p_hi + tol):
                return None
            continue
        lo = max(lo, (p_lo - u[i]) / lam[i])
        hi = min(hi, (p_hi - u[i]) / lam[i])
    if lo > hi or lo > tol or hi < -tol:
        return None
    return lo, hi


def feasible_sigma(sigma_hat: float, u_hat_b, x_hat, cfg: SystemConfig, eff_b, lambda_b,
                   margin=None) -> tuple[float, bool]:
    """Largest-magnitude sigma with the sign of ``sigma_hat`` and
    ``|sigma| <= |sigma_hat|`` that keeps the compensated batteries feasible.

    Returns ``(sigma, ok)``; ``ok`` is False (and sigma 0) when the
    uncompensated set-points are themselves infeasible.
    """
    interval = sigma_interval(u_hat_b, x_hat, cfg, eff_b, lambda_b, margin)
    if interval is None:
        logger.warning("uncompensated battery set-points infeasible; sigma forced to 0")
        return 0.0, False
    lo, hi = interval
    if sigma_hat >= 0:
        return float(min(sigma_hat, max(hi, 0.0))), True
    return float(max(sigma_hat, min(lo, 0.0))), True


def compensate(u_hat_b, sigma: float, eff_b, lambda_b) -> np.ndarray:
    u = _vec(u_hat_b, name="u_hat_b")
    e = _mask(eff_b, name="eff_b")
    lam = _vec(lambda_b, name="lambda_b")
    _same_length(u, e, lam)
    if not np.isfinite(sigma):
        raise ValueError("sigma must be finite")
    return u + np.where(e, lam * sigma, 0.0)
