"""Tangent propagation, trace sums ``q_n`` and the Re/G dimension bounds.

The tangent map is the exact linearization of one integrating-factor Heun
step, so the symmetric finite difference of the discrete solver converges to
it at second order and matches it to rounding on linear dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .forcing import ForcingSpec, mean_intensity, sup_norm_in_time
from .operators import GalerkinTensors, jacobian_rows
from .solver import ModalState, SolverConfig, evolve, rhs_nonlinear, _schedule


def _tangent_advance(t, a, U, dt, cfg, tensors, forcing):
    """Linearized IF-Heun step: returns ``(a_new, U_new)`` with frames as rows of ``U``."""
    E = np.exp(-cfg.nu * tensors.eigenvalues * dt)
    k1 = rhs_nonlinear(tensors, forcing, t, a)
    dk1 = -U @ jacobian_rows(tensors, a)
    if cfg.scheme == "if-euler":
        return E * (a + dt * k1), E * (U + dt * dk1)
    stage = E * (a + dt * k1)
    dstage = E * (U + dt * dk1)
    k2 = rhs_nonlinear(tensors, forcing, t + dt, stage)
    dk2 = -dstage @ jacobian_rows(tensors, stage)
    return E * a + 0.5 * dt * (E * k1 + k2), E * U + 0.5 * dt * (E * dk1 + dk2)


def quadratic_form_terms(tensors: GalerkinTensors, a, Q):
    """Per-frame ``<F'(v) e, e>`` for orthonormal rows ``Q``.

    ``-nu ||e||^2 - b(e, psi, e) - b(e, v, e)``; the terms ``b(psi, e, e)``
    and ``b(v, e, e)`` vanish by antisymmetry and are dropped.
    """
    lam = tensors.eigenvalues
    visc = -tensors.nu * np.sum(lam * Q**2, axis=1)
    lift = -np.einsum("ni,ik,nk->n", Q, tensors.C_vpsi, Q)
    Tv = np.einsum("ijk,j->ik", tensors.T, a)
    conv = -np.einsum("ni,ik,nk->n", Q, Tv, Q)
    return visc + lift + conv


def full_quadratic_form_terms(tensors: GalerkinTensors, a, Q):
    """``<F'(v) e, e>`` from the full Jacobian (debug form, keeps the vanishing terms)."""
    return -tensors.nu * np.sum(tensors.eigenvalues * Q**2, axis=1) - np.einsum(
        "ni,ik,nk->n", Q, jacobian_rows(tensors, a), Q)


def vanishing_terms(tensors: GalerkinTensors, a, e) -> dict:
    """``b(psi, e, e)`` and ``b(v, e, e)`` evaluated explicitly."""
    return {"b_psi_e_e": float(e @ tensors.C_psiv @ e),
            "b_v_e_e": float(np.einsum("ijk,i,j,k->", tensors.T, a, e, e))}


@dataclass
class TangentBundle:
    t: float
    frames: np.ndarray  # (n, m), rows are tangent vectors
    period: int = 10
    log_volume: np.ndarray = None  # accumulated log |R_ii| per direction
    trace_integral: np.ndarray = None  # accumulated int sum_{i<=n'} <F'e_i, e_i>, per n'
    elapsed: float = 0.0
    steps: int = 0

    def __post_init__(self):
        self.frames = np.array(self.frames, dtype=float)
        n = self.frames.shape[0]
        if self.log_volume is None:
            self.log_volume = np.zeros(n)
        if self.trace_integral is None:
            self.trace_integral = np.zeros(n)
        if self.period < 1:
            raise ValueError("reorthonormalization period must be >= 1")

    @property
    def n(self):
        return self.frames.shape[0]

    @classmethod
    def identity(cls, t, n, m, period=10):
        return cls(t, np.eye(m)[:n], period=period)

    def gram_error(self):
        return float(np.max(np.abs(self.frames @ self.frames.T - np.eye(self.n))))


def _orthonormal(frames):
    Q, R = np.linalg.qr(frames.T)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return (Q * s).T, np.abs(np.diag(R))


def evolve_tangent(bundle: TangentBundle, base, cfg: SolverConfig, tensors: GalerkinTensors, forcing=None,
                   t_end=None, accumulate=True):
    """Advance frames along a base trajectory.

    ``base`` is either a list of ``ModalState`` spaced by ``cfg.dt`` (the
    stage states are rebuilt from it) or a single starting ``ModalState``
    that is co-integrated up to ``t_end``.  Returns ``(bundle, final base state)``.
    """
    if isinstance(base, ModalState):
        if abs(base.t - bundle.t) > 1e-12:
            raise ValueError(f"base starts at {base.t}, bundle at {bundle.t}")
        n_steps, rem = _schedule(base.t, t_end, cfg.dt)
        a = np.array(base.a, float)
        steps = [(base.t + k * cfg.dt, cfg.dt) for k in range(n_steps)] + ([(base.t + n_steps * cfg.dt, rem)] if rem else [])
        states = None
    else:
        if abs(base[0].t - bundle.t) > 1e-12:
            raise ValueError(f"base trajectory starts at {base[0].t}, bundle at {bundle.t}")
        gaps = np.diff([s.t for s in base])
        if not np.allclose(gaps, cfg.dt, rtol=1e-8, atol=1e-12):
            raise ValueError("base trajectory must be recorded at every solver step")
        a = np.array(base[0].a, float)
        steps = [(s.t, cfg.dt) for s in base[:-1]]
        states = base
    U = bundle.frames
    if accumulate and steps:
        terms = np.cumsum(quadratic_form_terms(tensors, a, _orthonormal(U)[0]))
    for k, (tk, h) in enumerate(steps):
        a_next, U = _tangent_advance(tk, a, U, h, cfg, tensors, forcing)
        if states is not None:
            drift = np.max(np.abs(a_next - states[k + 1].a))
            if drift > 1e-9 * max(1.0, np.max(np.abs(a_next))):
                raise ValueError(f"base trajectory inconsistent with solver at t={states[k + 1].t}")
            a_next = np.array(states[k + 1].a)
        a = a_next
        bundle.steps += 1
        if accumulate:
            new_terms = np.cumsum(quadratic_form_terms(tensors, a, _orthonormal(U)[0]))
            bundle.trace_integral += 0.5 * h * (terms + new_terms)
            terms = new_terms
        bundle.elapsed += h
        if bundle.steps % bundle.period == 0:
            U, r = _orthonormal(U)
            bundle.log_volume += np.log(r)
    bundle.frames = U
    bundle.t = steps[-1][0] + steps[-1][1] if steps else bundle.t
    return bundle, ModalState(bundle.t, a)


def propagate(a0, xi, t0, t1, cfg, tensors, forcing=None):
    """Tangent image of a single vector ``xi`` under ``U(t1, t0)`` at ``a0``."""
    b = TangentBundle(t0, np.atleast_2d(xi), period=10**9)
    b, _ = evolve_tangent(b, ModalState(t0, a0), cfg, tensors, forcing, t_end=t1, accumulate=False)
    return b.frames[0]


def tangent_fd_check(a0, xi, t0, t1, hs, cfg, tensors, forcing=None) -> dict:
    """Symmetric difference ``(U(v0 + h xi) - U(v0 - h xi)) / 2h`` against the tangent image."""
    hs = list(hs)
    if any(hs[i + 1] >= hs[i] for i in range(len(hs) - 1)):
        raise ValueError("h ladder must be decreasing")
    a0 = np.asarray(a0, float)
    xi = np.asarray(xi, float)
    lin = propagate(a0, xi, t0, t1, cfg, tensors, forcing)
    scale = max(np.linalg.norm(lin), 1e-300)
    rows = []
    for h in hs:
        pm = evolve(ModalState(t0, np.stack([a0 + h * xi, a0 - h * xi])), t1, cfg, tensors, forcing).a
        fd = (pm[0] - pm[1]) / (2 * h)
        rows.append({"h": h, "abs_error": float(np.linalg.norm(fd - lin)),
                     "rel_error": float(np.linalg.norm(fd - lin) / scale) if np.linalg.norm(lin) > 0 else 0.0})
    orders = []
    for r0, r1 in zip(rows, rows[1:]):
        if r0["abs_error"] > 0 and r1["abs_error"] > 0:
            orders.append(math.log(r0["abs_error"] / r1["abs_error"]) / math.log(r0["h"] / r1["h"]))
    return {"rows": rows, "orders": orders, "tangent": lin}


@dataclass
class TraceResult:
    n_max: int
    q: np.ndarray
    q_volume: np.ndarray
    first_negative: int | None
    stabilized: bool
    half_change: float
    bundle: TangentBundle = field(repr=False, default=None)

    def table(self):
        return [{"n": i + 1, "q_n": float(self.q[i]), "q_n_volume": float(self.q_volume[i])} for i in range(self.n_max)]


def trace_exponents(base_state: ModalState, T: float, n_max: int, cfg, tensors, forcing=None, period=10,
                    transient=0.0, stab_tol=0.05) -> TraceResult:
    """Time averages ``q_n`` of ``Tr_n F'`` over ``[t0 + transient, t0 + transient + T]``.

    Frames start at the first ``n_max`` coordinate directions.  The average
    counts as stabilized when the first-half and full-window averages differ
    by less than ``stab_tol`` (relative, max over n).
    """
    m = tensors.m
    if not 1 <= n_max <= m:
        raise ValueError("n_max must lie in [1, m]")
    s = base_state
    if transient > 0:
        s = evolve(s, s.t + transient, cfg, tensors, forcing)
    half = TangentBundle.identity(s.t, n_max, m, period)
    half, mid = evolve_tangent(half, s, cfg, tensors, forcing, t_end=s.t + T / 2)
    q_half = half.trace_integral / half.elapsed
    full, _ = evolve_tangent(half, mid, cfg, tensors, forcing, t_end=s.t + T)
    q = full.trace_integral / full.elapsed
    qv = np.cumsum(full.log_volume) / full.elapsed
    change = float(np.max(np.abs(q - q_half) / np.maximum(np.abs(q), 1e-300)))
    neg = np.flatnonzero(q < 0)
    return TraceResult(n_max=n_max, q=q, q_volume=qv, first_negative=int(neg[0]) + 1 if neg.size else None,
                       stabilized=change < stab_tol, half_change=change, bundle=full)


def lieb_thirring_probe(frames, basis) -> float:
    """``int (sum_i |e_i|^2)^2 / sum_i ||e_i||^2`` for orthonormal modal frames (rows)."""
    Q = np.atleast_2d(np.asarray(frames, float))
    fields = np.tensordot(Q, basis.velocities, axes=(1, 0))  # (n, 2, ny, nx)
    rho = np.sum(fields**2, axis=(0, 1))
    num = float(np.sum(rho**2) * basis.grid.h**2)
    den = float(np.sum(basis.eigenvalues * Q**2))
    return num / den


@dataclass
class DimensionReport:
    nu: float
    lam1: float
    M: float
    M_converged: bool
    Re_stmt: float
    Re_proof: float
    G_stmt: float
    G_proof: float
    threshold_rhs: float
    case_I_n: int
    case_II_bound: float
    case_II_bound_proof: float
    n_query: int
    applicable_case: str
    C_hat: tuple
    C_hat_source: str
    q_table: list = field(default_factory=list)
    first_negative_q: int | None = None
    q_stabilized: bool | None = None

    def as_dict(self):
        return asdict(self)


def case_I_lhs(nu, n, area=1.0):
    return math.pi * nu**2 * n**2 / (2 * area)


def case_I_rhs(nu, eps, sup_phi, M, area=1.0, perimeter=4.0, C=1.0):
    return C / nu**2 * (nu**2 * area / eps + eps * perimeter) * sup_phi + C / nu * M


def dimension_bounds(nu, lam1, eps, sup_phi, M=0.0, f_sup_H=0.0, area=1.0, perimeter=4.0, C=1.0,
                     C_hat=(1.0, 1.0, 1.0), C_hat_source="default (uncalibrated)", n_query=None,
                     M_converged=True, trace: TraceResult | None = None) -> DimensionReport:
    """Both cases of the dimension theorem for the given data."""
    rhs = case_I_rhs(nu, eps, sup_phi, M, area, perimeter, C)
    nI = max(1, int(math.ceil(math.sqrt(2 * area * rhs / (math.pi * nu**2)) - 1e-12)))
    while case_I_lhs(nu, nI, area) < rhs:
        nI += 1
    Re_s, Re_p = sup_phi / (nu * lam1), sup_phi / (nu * math.sqrt(lam1))
    G_s, G_p = f_sup_H**2 / (nu**2 * lam1), f_sup_H / (nu**2 * lam1)
    c1, c2, c3 = C_hat
    nq = nI if n_query is None else n_query
    return DimensionReport(
        nu=nu, lam1=lam1, M=M, M_converged=M_converged, Re_stmt=Re_s, Re_proof=Re_p, G_stmt=G_s, G_proof=G_p,
        threshold_rhs=rhs, case_I_n=nI, case_II_bound=c1 * Re_s + c2 * G_s + c3,
        case_II_bound_proof=c1 * Re_p + c2 * G_p + c3, n_query=nq,
        applicable_case="I" if case_I_lhs(nu, nq, area) >= rhs else "II", C_hat=tuple(C_hat),
        C_hat_source=C_hat_source, q_table=trace.table() if trace else [],
        first_negative_q=trace.first_negative if trace else None,
        q_stabilized=trace.stabilized if trace else None)


def forcing_statistics(forcing: ForcingSpec | None, eigenvalues, t) -> dict:
    """``M`` (time-averaged V' intensity) and ``sup_s ||f(s)||_H``."""
    if forcing is None:
        return {"M": 0.0, "M_converged": True, "f_sup_H": 0.0}
    mi = mean_intensity(forcing, eigenvalues, t)
    return {"M": mi["value"], "M_converged": mi["converged"], "f_sup_H": sup_norm_in_time(forcing, eigenvalues, t)}
