"""PV availability and load demand profiles (actual and forecast).

A profile holds one reference curve per quantity on a uniform time grid;
individual units scale the reference (e.g. PV units at 0.5/1/1.5 of it).
The bundled synthetic day stands in for measured data: a bell-shaped PV
curve peaking at 1.5 pu around noon and a double-peak residential load.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

COLUMNS = ("t_hours", "pv_actual_pu", "pv_forecast_pu", "load_actual_pu", "load_forecast_pu")


class ProfileError(ValueError):
    pass


@dataclass
class Profiles:
    t: np.ndarray
    pv_actual: np.ndarray
    pv_forecast: np.ndarray
    load_actual: np.ndarray
    load_forecast: np.ndarray

    def __post_init__(self):
        for name in ("t", "pv_actual", "pv_forecast", "load_actual", "load_forecast"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        n = self.t.size
        if n < 2:
            raise ProfileError("profile needs at least two samples")
        if any(getattr(self, c).size != n for c in ("pv_actual", "pv_forecast", "load_actual", "load_forecast")):
            raise ProfileError("profile columns differ in length")
        dt = np.diff(self.t)
        if np.any(dt <= 0):
            raise ProfileError("t_hours must be strictly increasing")
        if not np.allclose(dt, dt[0], rtol=0, atol=1e-9):
            raise ProfileError("t_hours must be a uniform grid")
        for name in ("pv_actual", "pv_forecast", "load_actual", "load_forecast"):
            if np.any(getattr(self, name) < 0) or not np.all(np.isfinite(getattr(self, name))):
                raise ProfileError(f"{name} must be finite and nonnegative")

    @property
    def step(self) -> float:
        return float(self.t[1] - self.t[0])

    def check_grid(self, T_s: float, duration: float, horizon: int) -> None:
        if abs(self.step - T_s) > 1e-9:
            raise ProfileError(f"profile step {self.step} h does not match T_s = {T_s} h")
        if abs(self.t[0]) > 1e-9:
            raise ProfileError("profile must start at t = 0")
        need = duration + horizon * T_s
        if self.t[-1] < need - 1e-9:
            raise ProfileError(f"profile ends at {self.t[-1]} h, needs to cover {need} h")

    def index(self, k: int) -> int:
        if not 0 <= k < self.t.size:
            raise ProfileError(f"step {k} outside the profile")
        return k


def _pv_shape(t):
    h = np.mod(t, 24.0)
    s = np.sin(np.pi * (h - 6.0) / 12.0)
    return np.where((h > 6.0) & (h < 18.0), 1.5 * np.clip(s, 0, None) ** 1.5, 0.0)


def _load_shape(t):
    h = np.mod(t, 24.0)
    # periodic distance in hours
    def bump(center, width):
        d = np.minimum(np.abs(h - center), 24.0 - np.abs(h - center))
        return np.exp(-(d / width) ** 2)
    return 0.3 + 0.3 * bump(8.0, 1.5) + 0.45 * bump(19.0, 2.0)


def synthetic(T_s: float = 0.25, hours: float = 30.0, error_band: float = 0.0,
              seed: int = 0) -> Profiles:
    """Synthetic day(s) on a grid of step ``T_s`` covering ``[0, hours]``.

    The forecast equals the actual curve scaled by ``1 + e`` with ``e``
    drawn uniformly from ``[-error_band, error_band]`` per sample (``e = 0``
    at ``t = 0``).
    """
    n = int(round(hours / T_s)) + 1
    t = np.arange(n) * T_s
    pv = _pv_shape(t)
    load = _load_shape(t)
    rng = np.random.default_rng(seed)
    e_pv = rng.uniform(-error_band, error_band, n)
    e_load = rng.uniform(-error_band, error_band, n)
    e_pv[0] = e_load[0] = 0.0
    return Profiles(t, pv, pv * (1 + e_pv), load, load * (1 + e_load))


def read_csv(path) -> Profiles:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"profile file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ProfileError(f"{path}: empty profile file") from None
        if tuple(h.strip() for h in header) != COLUMNS:
            raise ProfileError(f"{path}: header must be {','.join(COLUMNS)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ProfileError(f"{path}:{lineno}: non-numeric value") from None
            if len(row) != len(COLUMNS):
                raise ProfileError(f"{path}:{lineno}: expected {len(COLUMNS)} columns")
    if not rows:
        raise ProfileError(f"{path}: no data rows")
    a = np.array(rows)
    try:
        return Profiles(*a.T)
    except ProfileError as exc:
        raise ProfileError(f"{path}: {exc}") from None


def write_csv(p: Profiles, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for row in zip(p.t, p.pv_actual, p.pv_forecast, p.load_actual, p.load_forecast):
            w.writerow([f"{v:.9g}" for v in row])
