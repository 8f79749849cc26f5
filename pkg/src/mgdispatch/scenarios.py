"""Scenario files (JSON) and the four reference cases."""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from . import mpc
from .model import SystemConfig
from .profiles import Profiles, read_csv, synthetic
from .sim import DisturbanceModel, FaultEvent, Scenario

SCHEMA_VERSION = 1
GRID_M = -0.0979  # constant grid power of the fixed-mode case (export)


class ScenarioError(ValueError):
    """Malformed scenario document; the message names the offending field."""


_CONFIG_KEYS = {
    "n_b", "n_s", "n_l", "T_s", "N", "P_s_min", "P_s_max", "P_b_min", "P_b_max", "x_min",
    "x_max", "x_b_min", "x_b_max", "C_s", "C_b1", "C_b2", "C_g1", "C_g2", "lambda_b", "Q", "R", "P0",
}
_TOP_KEYS = {
    "schema_version", "name", "config", "mode", "profiles", "faults", "disturbance", "seed",
    "duration_h", "compensation", "pv_scale", "load_scale", "x0", "x_hat0", "conservative_soc",
    "network",
}
_PROFILE_KEYS = {"csv", "synthetic_error_band", "synthetic_seed", "hours"}
_FAULT_KEYS = {"kind", "unit", "layer", "start_h", "end_h"}
_DIST_KEYS = {"kind", "omega_box", "upsilon_box"}
_MODE_KEYS = {"kind", "value"}
NETWORK_KEYS = {"host", "base_port", "n_hubs", "transport", "jitter_s", "tick_timeout_s"}


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where}: expected an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ScenarioError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _mode_from(doc) -> object:
    if isinstance(doc, str):
        doc = {"kind": doc}
    _check_keys(doc, _MODE_KEYS, "mode")
    kind = doc.get("kind", "islanded")
    if kind == "islanded":
        return mpc.Islanded()
    if kind == "grid-variable":
        return mpc.GridVariable()
    if kind == "grid-fixed":
        if "value" not in doc:
            raise ScenarioError("mode.value: required for grid-fixed")
        return mpc.GridFixed(float(doc["value"]))
    raise ScenarioError(f"mode.kind: unknown mode {kind!r}")


def mode_to_doc(mode) -> dict:
    if isinstance(mode, mpc.GridFixed):
        return {"kind": "grid-fixed", "value": mode.value}
    if isinstance(mode, mpc.GridVariable):
        return {"kind": "grid-variable"}
    return {"kind": "islanded"}


def parse_mode(text: str):
    """``islanded``, ``grid-variable`` or ``grid-fixed:<value>`` (command-line form)."""
    if text.startswith("grid-fixed"):
        _, _, v = text.partition(":")
        try:
            return mpc.GridFixed(float(v) if v else 0.0)
        except ValueError:
            raise ScenarioError(f"--mode: bad grid-fixed value {v!r}") from None
    return _mode_from({"kind": text})


def scenario_from_dict(doc: dict, base_dir: Path | None = None) -> Scenario:
    """Build a :class:`Scenario`; omitted fields take the reference defaults."""
    _check_keys(doc, _TOP_KEYS, "scenario")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    cdoc = doc.get("config", {})
    _check_keys(cdoc, _CONFIG_KEYS, "config")
    T_s = cdoc.get("T_s", 0.25)
    N = cdoc.get("N", 12)
    try:
        cfg = SystemConfig.reference(T_s=T_s, N=N)
        rest = {k: v for k, v in cdoc.items() if k not in ("T_s", "N")}
        if rest:
            cfg = cfg.with_updates(**rest)
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"config: {exc}") from None
    duration = float(doc.get("duration_h", 24.0))

    pdoc = doc.get("profiles", {})
    _check_keys(pdoc, _PROFILE_KEYS, "profiles")
    if "csv" in pdoc:
        p = Path(pdoc["csv"])
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        profiles = read_csv(p)  # FileNotFoundError propagates (I/O failure)
    else:
        hours = float(pdoc.get("hours", duration + (cfg.N + 1) * cfg.T_s))
        profiles = synthetic(cfg.T_s, hours, float(pdoc.get("synthetic_error_band", 0.0)),
                             int(pdoc.get("synthetic_seed", 0)))

    faults = []
    for i, f in enumerate(doc.get("faults", [])):
        where = f"faults[{i}]"
        _check_keys(f, _FAULT_KEYS, where)
        try:
            faults.append(FaultEvent(f["kind"], int(f["unit"]), f["layer"],
                                     float(f["start_h"]), float(f["end_h"])))
        except KeyError as exc:
            raise ScenarioError(f"{where}.{exc.args[0]}: required") from None
        except ValueError as exc:
            raise ScenarioError(f"{where}: {exc}") from None

    ddoc = doc.get("disturbance", {})
    _check_keys(ddoc, _DIST_KEYS, "disturbance")
    try:
        dist = DisturbanceModel(**ddoc)
    except ValueError as exc:
        raise ScenarioError(f"disturbance: {exc}") from None

    net = doc.get("network", {})
    _check_keys(net, NETWORK_KEYS, "network")

    kwargs = {}
    for key in ("pv_scale", "load_scale", "x0", "x_hat0"):
        if key in doc:
            kwargs[key] = tuple(float(v) for v in doc[key])
    try:
        sc = Scenario(
            config=cfg, profiles=profiles, mode=_mode_from(doc.get("mode", "islanded")),
            faults=faults, disturbance=dist, seed=int(doc.get("seed", 0)), duration=duration,
            compensation_enabled=bool(doc.get("compensation", True)),
            conservative_soc=bool(doc.get("conservative_soc", False)),
            n_hubs=net.get("n_hubs"), name=str(doc.get("name", "scenario")), **kwargs)
    except ValueError as exc:
        raise ScenarioError(f"scenario: {exc}") from None
    sc.network = dict(net)
    return sc


def load_scenario(path) -> Scenario:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return scenario_from_dict(doc, path.parent)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def scenario_to_dict(sc: Scenario, profile_csv: str | None = None) -> dict:
    """Inverse of :func:`scenario_from_dict` for scenarios using defaults plus overrides.

    Profiles are referenced by ``profile_csv``; without it the synthetic
    settings stored on the scenario (``sc.profile_doc``) are emitted.
    """
    doc = {
        "schema_version": SCHEMA_VERSION, "name": sc.name,
        "config": {"T_s": sc.config.T_s, "N": sc.config.N},
        "mode": mode_to_doc(sc.mode),
        "profiles": {"csv": profile_csv} if profile_csv else dict(getattr(sc, "profile_doc", {})),
        "faults": [{"kind": f.kind, "unit": f.unit, "layer": f.layer, "start_h": f.start,
                    "end_h": f.end} for f in sc.faults],
        "disturbance": {"kind": sc.disturbance.kind, "omega_box": sc.disturbance.omega_box,
                        "upsilon_box": sc.disturbance.upsilon_box},
        "seed": sc.seed, "duration_h": sc.duration, "compensation": sc.compensation_enabled,
    }
    net = getattr(sc, "network", None)
    if net:
        doc["network"] = dict(net)
    return doc


def _case(name, mode, faults, error_band, *, seed=0, compensation=True, disturbance=None,
          duration=24.0, profile_seed=0, **extra):
    doc = {**extra,
        "schema_version": SCHEMA_VERSION, "name": name, "mode": mode_to_doc(mode),
        "profiles": {"synthetic_error_band": error_band, "synthetic_seed": profile_seed},
        "faults": faults, "seed": seed, "duration_h": duration, "compensation": compensation,
        "disturbance": {"kind": "uniform-box"} if disturbance is None else disturbance,
    }
    sc = scenario_from_dict(doc)
    sc.profile_doc = doc["profiles"]
    return sc


_B2_COMM = {"kind": "battery", "unit": 2, "layer": "communication", "start_h": 11.0, "end_h": 13.0}
_B2_ELEC = {"kind": "battery", "unit": 2, "layer": "electrical", "start_h": 11.0, "end_h": 13.0}
_NONE = {"kind": "none"}


def case1(seed: int = 0, duration: float = 24.0) -> Scenario:
    """Islanded, exact forecasts, battery 2 loses its link over 11 h - 13 h."""
    return _case("case1", mpc.Islanded(), [_B2_COMM], 0.0, seed=seed, duration=duration)


def case2(compensation: bool = True, seed: int = 0, error_band: float = 0.1) -> Scenario:
    """Islanded with a +-10 % forecast error band; with or without compensation."""
    return _case("case2" if compensation else "case2-nocomp", mpc.Islanded(), [], error_band,
                 seed=seed, compensation=compensation, profile_seed=2)


def case3(fixed: bool = True, seed: int = 0) -> Scenario:
    """Grid-connected (constant export or free grid power), battery 2 link fault."""
    mode = mpc.GridFixed(GRID_M) if fixed else mpc.GridVariable()
    return _case("case3" if fixed else "case3-variable", mode, [_B2_COMM], 0.1, seed=seed,
                 profile_seed=3)


def case4(seed: int = 0, disturbance: bool = True) -> Scenario:
    """Islanded, battery 2 electrically disconnected over 11 h - 13 h."""
    return _case("case4" if disturbance else "case4-quiet", mpc.Islanded(), [_B2_ELEC], 0.0,
                 seed=seed, disturbance=None if disturbance else _NONE)


def quiet(duration: float = 24.0) -> Scenario:
    """No faults, no disturbance, exact forecasts."""
    return _case("quiet", mpc.Islanded(), [], 0.0, disturbance=_NONE, duration=duration,
                 x_hat0=[3.0, 4.0, 6.0])


CASES = {"case1": case1, "case2": case2, "case3": case3, "case4": case4}


def bundled(name: str) -> Path:
    """Path of a bundled scenario or profile file (``case1.json`` ...)."""
    return Path(str(resources.files("mgdispatch") / "data" / name))


def profiles_equal(a: Profiles, b: Profiles, tol: float = 0.0) -> bool:
    return all(np.allclose(getattr(a, n), getattr(b, n), rtol=0, atol=tol)
               for n in ("t", "pv_actual", "pv_forecast", "load_actual", "load_forecast"))
