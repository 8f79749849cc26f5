"""Ellipsoidal set-membership state estimation.

Two-step recursion (prediction, measurement update) whose gain ``L`` and
shape matrix ``P`` come from a trace-minimising semidefinite program.  The
LMI is affine in ``(P, L, lambda_1, lambda_2, lambda_3)`` jointly, so one
SDP per step is enough; it is compiled once per estimator (cvxpy DPP) and
re-solved with new parameter values each step.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .model import LtiMatrices

logger = logging.getLogger(__name__)

SYM_TOL = 1e-10
PSD_TOL = 1e-9
CERT_TOL = 1e-7
CONTAIN_TOL = 1e-9


class DegenerateSetError(ValueError):
    """Raised when a shape matrix is not positive definite."""


class EstimatorFailure(RuntimeError):
    """The SDP solver failed to return a usable solution."""


def _repair(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    lo = np.linalg.eigvalsh(P).min()
    if lo <= 0:
        if lo < -PSD_TOL:
            raise DegenerateSetError(f"shape matrix has eigenvalue {lo:.3e}")
        P = P + 1e-9 * np.eye(P.shape[0])
    return P


@dataclass
class Ellipsoid:
    """The set {x : (x - center)^T shape^{-1} (x - center) <= 1}."""

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        self.shape = np.atleast_2d(np.asarray(self.shape, dtype=float))
        n = self.center.shape[0]
        if self.shape.shape != (n, n):
            raise ValueError(f"shape must be {n}x{n}")
        if np.max(np.abs(self.shape - self.shape.T)) > SYM_TOL:
            raise DegenerateSetError("shape matrix is not symmetric")
        self.shape = 0.5 * (self.shape + self.shape.T)

    def quadratic_form(self, x) -> float:
        """``(x - c)^T P^{-1} (x - c)``; raises DegenerateSetError for a singular shape."""
        d = np.atleast_1d(np.asarray(x, dtype=float)) - self.center
        z = np.linalg.solve(cholesky_factor(self.shape), d)
        return float(z @ z)

    def contains(self, x) -> bool:
        return contains(self, x)


@dataclass
class NoiseBounds:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
                raise DegenerateSetError(f"{name} must be symmetric positive definite")
            setattr(self, name, M)


@dataclass
class SmeSolution:
    P: np.ndarray
    L: np.ndarray
    lambdas: np.ndarray
    objective: float
    certificate: float = float("nan")
    status: str = "optimal"

    @property
    def lambda1(self) -> float:
        return float(self.lambdas[0])

    @property
    def lambda2(self) -> float:
        return float(self.lambdas[1])

    @property
    def lambda3(self) -> float:
        return float(self.lambdas[2])


def cholesky_factor(P) -> np.ndarray:
    """Lower-triangular ``E`` with ``E @ E.T == P``."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise DegenerateSetError("Cholesky factorisation failed; matrix not positive definite") from exc


def contains(e: Ellipsoid, x) -> bool:
    return e.quadratic_form(x) <= 1.0 + CONTAIN_TOL


def predict(x_prev, lti: LtiMatrices, u_prev, C=None):
    """One-step prediction of state and output.

    ``lti`` carries ``B`` and ``delta`` of the previous step; ``C`` is the
    output matrix of the current step and defaults to ``lti.C``.
    """
    x_prev = np.atleast_1d(np.asarray(x_prev, dtype=float))
    u_prev = np.atleast_1d(np.asarray(u_prev, dtype=float))
    C = lti.C if C is None else np.atleast_2d(C)
    if lti.B.shape != (x_prev.size, u_prev.size):
        raise ValueError("dimension mismatch between B, state and input")
    x_pred = x_prev + lti.B @ u_prev + lti.delta
    return x_pred, C @ x_pred


def correct(x_pred, y_pred, y, L) -> np.ndarray:
    x_pred = np.atleast_1d(np.asarray(x_pred, dtype=float))
    innovation = np.atleast_1d(np.asarray(y, dtype=float)) - np.atleast_1d(y_pred)
    L = np.atleast_2d(L)
    if L.shape != (x_pred.size, innovation.size):
        raise ValueError("dimension mismatch between gain and innovation")
    return x_pred + L @ innovation


def _phi(E, F, C, D, L) -> np.ndarray:
    n = E.shape[0]
    I_LC = np.eye(n) - L @ C
    return np.hstack([I_LC @ E, I_LC @ F, -L @ D, np.zeros((n, 1))])


def _psi_diag(lambdas, Q, R) -> np.ndarray:
    n = Q.shape[0]
    l1, l2, l3 = lambdas
    Psi = np.zeros((3 * n + 1, 3 * n + 1))
    Psi[:n, :n] = l1 * np.eye(n)
    Psi[n:2 * n, n:2 * n] = l2 * np.linalg.inv(Q)
    Psi[2 * n:3 * n, 2 * n:3 * n] = l3 * np.linalg.inv(R)
    Psi[-1, -1] = 1.0 - l1 - l2 - l3
    return Psi


def assemble_lmi(P_prev, bounds: NoiseBounds, lti: LtiMatrices, L, lambdas, P) -> np.ndarray:
    """Block matrix ``[[-Psi, Phi^T], [Phi, -P]]`` that must be NSD.

    ``lti`` supplies ``F`` of the previous step and ``C``, ``D`` of the
    current one.
    """
    E = cholesky_factor(P_prev)
    L = np.atleast_2d(np.asarray(L, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Phi = _phi(E, lti.F, lti.C, lti.D, L)
    Psi = _psi_diag(lambdas, bounds.Q, bounds.R)
    M = np.block([[-Psi, Phi.T], [Phi, -P]])
    return 0.5 * (M + M.T)


def lmi_certificate(P_prev, bounds, lti, L, lambdas, P) -> float:
    """Largest eigenvalue of the assembled LMI (<= CERT_TOL means certified)."""
    return float(np.linalg.eigvalsh(assemble_lmi(P_prev, bounds, lti, L, lambdas, P)).max())


def _minimal_shape(E, F, C, D, L, lambdas, Q, R) -> np.ndarray:
    # Schur complement of the LMI for fixed (L, lambda): P >= Phi Psi^+ Phi^T
    Phi = _phi(E, F, C, D, L)[:, :-1]
    n = E.shape[0]
    blocks = [lambdas[0] * np.eye(n), lambdas[1] * np.linalg.inv(Q), lambdas[2] * np.linalg.inv(R)]
    P = np.zeros((n, n))
    for j, Bk in enumerate(blocks):
        cols = Phi[:, j * n:(j + 1) * n]
        if not np.any(cols):
            continue
        P += cols @ np.linalg.pinv(Bk, rcond=1e-14, hermitian=True) @ cols.T
    return 0.5 * (P + P.T)


class TraceMinimizer:
    """Compiled trace-minimisation SDP for ``n`` batteries.

    Not reentrant: one caller at a time per instance.
    """

    def __init__(self, n: int, solver: str = "CLARABEL"):
        self.n = n
        self.solver = solver
        I = np.eye(n)
        Z = np.zeros((n, n))
        z = np.zeros((n, 1))
        self.P = cp.Variable((n, n), symmetric=True)
        self.L = cp.Variable((n, n))
        self.lam = cp.Variable(3, nonneg=True)
        self.E = cp.Parameter((n, n))
        self.CE = cp.Parameter((n, n))
        self.F = cp.Parameter((n, n))
        self.CF = cp.Parameter((n, n))
        self.D = cp.Parameter((n, n))
        self.Qi = cp.Parameter((n, n), PSD=True)
        self.Ri = cp.Parameter((n, n), PSD=True)
        Phi = cp.hstack([self.E - self.L @ self.CE, self.F - self.L @ self.CF,
                         -self.L @ self.D, z])
        last = cp.reshape(1 - cp.sum(self.lam), (1, 1), order="C")
        Psi = cp.bmat([
            [self.lam[0] * I, Z, Z, z],
            [Z, self.lam[1] * self.Qi, Z, z],
            [Z, Z, self.lam[2] * self.Ri, z],
            [z.T, z.T, z.T, last],
        ])
        M = cp.bmat([[-Psi, Phi.T], [Phi, -self.P]])
        self.problem = cp.Problem(cp.Minimize(cp.trace(self.P)),
                                  [0.5 * (M + M.T) << 0])

    def solve(self, P_prev, bounds: NoiseBounds, lti: LtiMatrices) -> SmeSolution:
        E = cholesky_factor(P_prev)
        C, D, F = lti.C, lti.D, lti.F
        self.E.value = E
        self.CE.value = C @ E
        self.F.value = F
        self.CF.value = C @ F
        self.D.value = D
        self.Qi.value = np.linalg.inv(bounds.Q)
        self.Ri.value = np.linalg.inv(bounds.R)
        try:
            self.problem.solve(solver=self.solver)
        except cp.error.SolverError as exc:
            raise EstimatorFailure(f"SDP solver error: {exc}") from exc
        if self.problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or self.L.value is None:
            raise EstimatorFailure(f"SDP returned status {self.problem.status}")
        return self._polish(P_prev, bounds, lti, E)

    def _polish(self, P_prev, bounds, lti, E) -> SmeSolution:
        L = np.array(self.L.value)
        # unobserved channels: C and D columns vanish, the gain column is irrelevant
        observed = np.any(lti.C != 0, axis=0) | np.any(lti.D != 0, axis=0)
        L[:, ~observed] = 0.0
        lam = np.clip(np.array(self.lam.value, dtype=float), 0.0, None)
        if lam.sum() > 1.0:
            lam = lam / lam.sum()
        P_solver = np.array(self.P.value)
        P_solver = 0.5 * (P_solver + P_solver.T)
        P = _minimal_shape(E, lti.F, lti.C, lti.D, L, lam, bounds.Q, bounds.R)
        if not (np.isfinite(P).all() and np.trace(P) <= np.trace(P_solver) * (1 + 1e-6) + 1e-12):
            P = P_solver
        P = _repair(P)
        cert = lmi_certificate(P_prev, bounds, lti, L, lam, P)
        status = "optimal" if cert <= CERT_TOL else "uncertified"
        if status != "optimal":
            logger.warning("SME solution LMI certificate %.3e exceeds %.1e", cert, CERT_TOL)
        return SmeSolution(P=P, L=L, lambdas=lam, objective=float(np.trace(P)),
                           certificate=cert, status=status)


def fallback_update(P_prev, bounds: NoiseBounds, lti: LtiMatrices) -> SmeSolution:
    """Measurement-free outer bound (``L = 0``) used when the SDP fails."""
    E = cholesky_factor(P_prev)
    n = E.shape[0]
    FQF = lti.F @ bounds.Q @ lti.F.T
    s1, s2 = np.sqrt(np.trace(P_prev)), np.sqrt(np.trace(FQF))
    lam = np.array([s1 / (s1 + s2), s2 / (s1 + s2), 0.0])
    L = np.zeros((n, n))
    P = _repair(P_prev / lam[0] + FQF / lam[1])
    cert = lmi_certificate(P_prev, bounds, lti, L, lam, P)
    return SmeSolution(P=P, L=L, lambdas=lam, objective=float(np.trace(P)),
                       certificate=cert, status="fallback")


def solve_update(P_prev, bounds: NoiseBounds, lti: LtiMatrices) -> SmeSolution:
    """Trace-minimal ``(P, L, lambda)`` for one step (compiles a fresh SDP)."""
    P_prev = np.atleast_2d(np.asarray(P_prev, dtype=float))
    return TraceMinimizer(P_prev.shape[0]).solve(P_prev, bounds, lti)


@dataclass
class SetMembershipEstimator:
    """Recursive estimator holding the current ellipsoid.

    >>> est = SetMembershipEstimator(Ellipsoid(x0_hat, P0), NoiseBounds(Q, R))  # doctest: +SKIP
    >>> sol = est.step(lti_prev, u_prev, lti_now, y)                           # doctest: +SKIP
    """

    estimate: Ellipsoid
    bounds: NoiseBounds
    solver: str = "CLARABEL"
    history: list = field(default_factory=list)

    def __post_init__(self):
        self._sdp = TraceMinimizer(self.estimate.center.shape[0], self.solver)

    def step(self, lti_prev: LtiMatrices, u_prev, lti_now: LtiMatrices, y, k: int | None = None) -> SmeSolution:
        """Advance one step: SDP for (P, L), then predict and correct the centre."""
        P_prev = self.estimate.shape
        try:
            sol = self._sdp.solve(P_prev, self.bounds, lti_now_with_prev_F(lti_prev, lti_now))
        except (EstimatorFailure, DegenerateSetError) as exc:
            logger.warning("SME step %s failed (%s); using measurement-free bound", k, exc)
            sol = fallback_update(P_prev, self.bounds, lti_now_with_prev_F(lti_prev, lti_now))
        x_pred, y_pred = predict(self.estimate.center, lti_prev, u_prev, C=lti_now.C)
        x_hat = correct(x_pred, y_pred, y, sol.L)
        self.estimate = Ellipsoid(x_hat, sol.P)
        self.history.append((k, sol))
        return sol

    def write_debug_csv(self, path) -> None:
        """Dump per-step (trace P, lambdas, P, L) rows for plotting."""
        if not self.history:
            raise ValueError("no estimator steps recorded")
        n = self.history[0][1].P.shape[0]
        header = ["k", "trace_P", "lambda1", "lambda2", "lambda3", "certificate", "status"]
        header += [f"P_{i+1}_{j+1}" for i in range(n) for j in range(n)]
        header += [f"L_{i+1}_{j+1}" for i in range(n) for j in range(n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, sol in self.history:
                w.writerow([k, f"{sol.objective:.9g}", *(f"{v:.9g}" for v in sol.lambdas),
                            f"{sol.certificate:.9g}", sol.status,
                            *(f"{v:.9g}" for v in sol.P.ravel()),
                            *(f"{v:.9g}" for v in sol.L.ravel())])


def lti_now_with_prev_F(lti_prev: LtiMatrices, lti_now: LtiMatrices) -> LtiMatrices:
    """LMI data for step k: ``F`` from step k-1, ``C`` and ``D`` from step k."""
    return LtiMatrices(B=lti_prev.B, F=lti_prev.F, C=lti_now.C, D=lti_now.D, delta=lti_prev.delta)
