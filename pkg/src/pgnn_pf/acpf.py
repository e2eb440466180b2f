"""AC power-flow equations and a Newton-Raphson solver.

Mismatch ordering is fixed: real-power mismatches at PQ and PV buses (bus
order), then reactive-power mismatches at PQ buses (bus order).  Unknowns are
ordered the same way: angles at PQ and PV buses, then magnitudes at PQ buses.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .case_model import AdmittanceMatrix, BusSystem, BusType

__all__ = [
    "InjectionVector",
    "NonConvergence",
    "PFSolution",
    "PFSpec",
    "PolarState",
    "RectState",
    "SingularJacobian",
    "injections_polar",
    "injections_rect",
    "jacobian",
    "mismatch",
    "newton_solve",
    "solution_csv",
]

PIVOT_FLOOR = 1e-12


class NonConvergence(RuntimeError):
    def __init__(self, iterations: int, norm: float):
        super().__init__(f"Newton-Raphson did not converge in {iterations} iterations "
                         f"(last mismatch inf-norm {norm:.3e})")
        self.iterations = iterations
        self.norm = norm


class SingularJacobian(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PolarState:
    v: np.ndarray
    theta: np.ndarray

    def to_rect(self) -> RectState:
        return RectState(self.v * np.cos(self.theta), self.v * np.sin(self.theta))


@dataclass(frozen=True, eq=False)
class RectState:
    mu: np.ndarray
    omega: np.ndarray

    def to_polar(self) -> PolarState:
        return PolarState(np.hypot(self.mu, self.omega), np.arctan2(self.omega, self.mu))


@dataclass(frozen=True, eq=False)
class InjectionVector:
    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True, eq=False)
class PFSpec:
    """Known quantities of a power-flow problem.

    All four arrays have one entry per bus; only the entries implied by each
    bus's type are read (P, Q at PQ; P, V at PV; V, theta at slack).
    """

    bus_types: np.ndarray
    p_spec: np.ndarray
    q_spec: np.ndarray
    v_spec: np.ndarray
    theta_spec: np.ndarray

    @property
    def pq(self) -> np.ndarray:
        return np.flatnonzero(self.bus_types == BusType.PQ)

    @property
    def pv(self) -> np.ndarray:
        return np.flatnonzero(self.bus_types == BusType.PV)

    @property
    def pvpq(self) -> np.ndarray:
        return np.flatnonzero(self.bus_types != BusType.SLACK)

    @property
    def slack(self) -> int:
        return int(np.flatnonzero(self.bus_types == BusType.SLACK)[0])

    @property
    def n_unknowns(self) -> int:
        return len(self.pvpq) + len(self.pq)

    @classmethod
    def from_system(cls, sys: BusSystem, p_gen=None, p_demand=None, q_demand=None) -> PFSpec:
        """Spec for the case's own operating point, or for given per-bus overrides (p.u.)."""
        p_gen = np.asarray(sys.gen_dispatch if p_gen is None else p_gen, dtype=float)
        p_demand = sys.p_demand if p_demand is None else np.asarray(p_demand, dtype=float)
        q_demand = sys.q_demand if q_demand is None else np.asarray(q_demand, dtype=float)
        types = np.array([b.bus_type for b in sys.buses], dtype=int)
        return cls(types, p_gen - p_demand, -q_demand, sys.v_set, sys.theta_set)

    @classmethod
    def from_state(cls, bus_types, state: PolarState, y: AdmittanceMatrix) -> PFSpec:
        """Spec whose exact solution is ``state``."""
        inj = injections_polar(state, y)
        return cls(np.asarray(bus_types, dtype=int), inj.p, inj.q,
                   np.array(state.v, dtype=float), np.array(state.theta, dtype=float))


@dataclass(frozen=True, eq=False)
class PFSolution:
    state: PolarState
    rect: RectState
    inj: InjectionVector
    iterations: int
    final_mismatch_norm: float


def injections_polar(state: PolarState, y: AdmittanceMatrix) -> InjectionVector:
    v, th = np.asarray(state.v, dtype=float), np.asarray(state.theta, dtype=float)
    d = th[:, None] - th[None, :]
    vv = v[:, None] * v[None, :]
    cos, sin = np.cos(d), np.sin(d)
    p = np.sum(vv * (y.g * cos + y.b * sin), axis=1)
    q = np.sum(vv * (y.g * sin - y.b * cos), axis=1)
    return InjectionVector(p, q)


def injections_rect(state: RectState, y: AdmittanceMatrix) -> InjectionVector:
    """Rectangular-coordinate injections; ``mu``/``omega`` may carry leading batch axes."""
    mu, om = np.asarray(state.mu, dtype=float), np.asarray(state.omega, dtype=float)
    g_mu, g_om = mu @ y.g.T, om @ y.g.T
    b_mu, b_om = mu @ y.b.T, om @ y.b.T
    p = mu * g_mu + om * g_om + om * b_mu - mu * b_om
    q = om * g_mu - mu * g_om - mu * b_mu - om * b_om
    return InjectionVector(p, q)


def mismatch(state: PolarState, spec: PFSpec, y: AdmittanceMatrix) -> np.ndarray:
    inj = injections_polar(state, y)
    pvpq, pq = spec.pvpq, spec.pq
    return np.concatenate([inj.p[pvpq] - spec.p_spec[pvpq], inj.q[pq] - spec.q_spec[pq]])


def jacobian(state: PolarState, spec: PFSpec, y: AdmittanceMatrix) -> np.ndarray:
    """Analytic d(mismatch)/d[theta(PQ,PV); V(PQ)].

    With complex voltages V and S = V conj(Y V)::

        dS/dtheta = j diag(V) conj(diag(I) - Y diag(V))
        dS/d|V|   = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
    """
    vc = state.v * np.exp(1j * state.theta)
    ybus = y.complex
    ibus = ybus @ vc
    vnorm = vc / np.abs(vc)
    ds_dth = 1j * vc[:, None] * np.conj(np.diag(ibus) - ybus * vc[None, :])
    ds_dv = vc[:, None] * np.conj(ybus * vnorm[None, :]) + np.diag(np.conj(ibus) * vnorm)
    pvpq, pq = spec.pvpq, spec.pq
    top = np.hstack([ds_dth.real[np.ix_(pvpq, pvpq)], ds_dv.real[np.ix_(pvpq, pq)]])
    bot = np.hstack([ds_dth.imag[np.ix_(pq, pvpq)], ds_dv.imag[np.ix_(pq, pq)]])
    return np.vstack([top, bot])


def _flat_start(spec: PFSpec) -> PolarState:
    n = len(spec.bus_types)
    v = np.ones(n)
    theta = np.zeros(n)
    fixed_v = spec.bus_types != BusType.PQ
    v[fixed_v] = spec.v_spec[fixed_v]
    theta[spec.slack] = spec.theta_spec[spec.slack]
    return PolarState(v, theta)


def newton_solve(spec: PFSpec, y: AdmittanceMatrix, tol: float = 1e-8,
                 max_iter: int = 20) -> PFSolution:
    """Solve the mismatch system from a flat start.

    Raises:
        NonConvergence: ``max_iter`` updates did not bring the inf-norm below ``tol``.
        SingularJacobian: an LU pivot fell below 1e-12 in magnitude.
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter at least 1")
    state = _flat_start(spec)
    v, theta = state.v.copy(), state.theta.copy()
    pvpq, pq = spec.pvpq, spec.pq
    npvpq = len(pvpq)
    g = mismatch(state, spec, y)
    norm = float(np.max(np.abs(g), initial=0.0))
    it = 0
    while norm > tol:
        if it == max_iter:
            raise NonConvergence(it, norm)
        jac = jacobian(PolarState(v, theta), spec, y)
        lu, piv = scipy.linalg.lu_factor(jac, check_finite=False)
        if np.min(np.abs(np.diag(lu))) < PIVOT_FLOOR:
            raise SingularJacobian(f"Jacobian pivot below {PIVOT_FLOOR:g} at iteration {it}")
        dx = scipy.linalg.lu_solve((lu, piv), -g, check_finite=False)
        theta[pvpq] += dx[:npvpq]
        v[pq] += dx[npvpq:]
        it += 1
        g = mismatch(PolarState(v, theta), spec, y)
        norm = float(np.max(np.abs(g)))
        if not np.isfinite(norm):
            raise NonConvergence(it, norm)
    state = PolarState(v, theta)
    assert norm <= tol
    return PFSolution(state, state.to_rect(), injections_polar(state, y), it, norm)


def solution_csv(sol: PFSolution, ext_ids=None) -> str:
    """Per-bus CSV: bus, v, theta, mu, omega, p, q (9 significant digits)."""
    n = len(sol.state.v)
    ids = range(1, n + 1) if ext_ids is None else ext_ids
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bus", "v", "theta", "mu", "omega", "p", "q"])
    cols = (sol.state.v, sol.state.theta, sol.rect.mu, sol.rect.omega, sol.inj.p, sol.inj.q)
    for i, bid in enumerate(ids):
        w.writerow([bid] + [f"{c[i]:.9g}" for c in cols])
    return buf.getvalue()
