"""Pullback diagnostics: absorbing radii, ladder ensembles, attractor fibers, tails.

All ensembles run as one batched integration.  Ladder initial times are
snapped onto the step grid of the deepest rung, so every rung is injected
into the batch when the clock reaches it and all rungs land on ``t``
together.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.spatial.distance import cdist

from .constants import Constants, unit_constants
from .errors import DivergenceError
from .forcing import ForcingSpec, check_translation_bounded, check_tempered, integrate
from .operators import GalerkinTensors, apply_nonlinearity, jacobian_rows
from .solver import ModalState, SolverConfig, _advance, evolve


# -- radii ----------------------------------------------------------------

@dataclass(frozen=True)
class AbsorbingParams:
    nu: float
    mu: float
    lam1: float
    epsilon: float
    sup_norm: float = 0.0
    perimeter: float = 4.0
    constants: Constants = field(default_factory=unit_constants)
    n0: int = 1
    h_window: float = 1.0
    f_loc_sq: float = 0.0
    f_pb_sq: float = 0.0
    f_loc_sq_H: float = 0.0
    f_pb_sq_H: float = 0.0

    def __post_init__(self):
        if not 0 < self.mu <= self.mu0 * (1 + 1e-12):
            raise ValueError(f"mu must lie in (0, nu*lam1/2 = {self.mu0:.6g}], got {self.mu}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.n0 < 1 or self.h_window <= 0:
            raise ValueError("n0 >= 1 and h_window > 0 required")

    @property
    def mu0(self):
        return 0.5 * self.nu * self.lam1

    def phi_terms(self) -> float:
        """``C nu^2/eps |dO| |phi|^2 + C eps |dO| |phi|^2``."""
        C = self.constants.get("C")
        s2 = self.sup_norm**2
        return C * self.nu**2 / self.epsilon * self.perimeter * s2 + C * self.epsilon * self.perimeter * s2

    def q(self, rate=None):
        return math.exp(-(self.mu if rate is None else rate) * self.n0 * self.h_window)


def absorbing_params(tensors: GalerkinTensors, nu, mu, epsilon, sup_norm, forcing=None, t=0.0,
                     constants=None, n0=1, h_window=1.0, perimeter=4.0) -> AbsorbingParams:
    """Fill in forcing norms (V' and H) as unit-window sups up to ``t``."""
    kw = {}
    if forcing is not None:
        for norm, sfx in (("V'", ""), ("H", "_H")):
            v = check_translation_bounded(forcing, tensors.eigenvalues, t, norm=norm).value
            kw["f_loc_sq" + sfx] = v
            kw["f_pb_sq" + sfx] = v
    return AbsorbingParams(nu=nu, mu=mu, lam1=float(tensors.eigenvalues[0]), epsilon=epsilon, sup_norm=sup_norm,
                           perimeter=perimeter, constants=constants or unit_constants(), n0=n0,
                           h_window=h_window, **kw)


def absorbing_radius(params: AbsorbingParams) -> float:
    """``rho_0^2(t)`` of the H-absorbing ball."""
    p = params
    q = p.q()
    return (1.0 + 4.0 / (p.nu * p.mu) * p.phi_terms() + p.f_loc_sq
            + 4.0 * q / (p.nu * p.lam1 * (1.0 - q)) * p.f_pb_sq)


def gronwall_bound(params: AbsorbingParams, v_tau_sq, elapsed) -> float:
    """Right side of the explicit H bound after time ``elapsed = t - tau``."""
    p = params
    phi = 4.0 / (p.nu * p.mu) * p.phi_terms()
    decay = math.exp(-p.mu * elapsed)
    return (phi + v_tau_sq) * decay + absorbing_radius(p) - 1.0


def K0_sq(params: AbsorbingParams, f_sq):
    """Envelope integrand ``K_0^2(s)`` with the explicit ``4/nu`` coefficient.

    ``f_sq`` is ``|f(s)|^2`` in the norm chosen by the caller (H by default,
    see ``gronwall_envelope_check``).
    """
    p = params
    return 4.0 / p.nu * (np.asarray(f_sq) / p.lam1 + p.phi_terms())


def gronwall_envelope_check(traj, params: AbsorbingParams, forcing=None, eigenvalues=None,
                            forcing_norm="H", max_samples=400) -> dict:
    """Max of ``(lhs - rhs)/max(1, rhs)`` for the H-envelope along a trajectory.

    ``rhs(t) = |v_tau|^2 e^{-mu (t - tau)} + int_tau^t e^{-mu (t-s)} K_0^2(s) ds``.
    """
    p = params
    tau = traj[0].t
    v0 = float(np.sum(np.asarray(traj[0].a) ** 2))
    idx = np.unique(np.linspace(0, len(traj) - 1, min(len(traj), max_samples)).astype(int))
    worst, rows = -math.inf, []
    c_phi = 4.0 / p.nu * p.phi_terms()
    for i in idx:
        s = traj[i]
        el = s.t - tau
        integral = c_phi * (-math.expm1(-p.mu * el)) / p.mu
        if forcing is not None and el > 0:
            integral += 4.0 / (p.nu * p.lam1) * integrate(
                forcing, eigenvalues, tau, s.t, forcing_norm, weight=lambda r, t=s.t: np.exp(-p.mu * (t - r)))
        rhs = v0 * math.exp(-p.mu * el) + integral
        lhs = float(np.sum(np.asarray(s.a) ** 2))
        viol = (lhs - rhs) / max(1.0, rhs)
        rows.append((s.t, lhs, rhs))
        worst = max(worst, viol)
    return {"max_violation": worst, "samples": rows, "forcing_norm": forcing_norm,
            "coefficient": "4/nu"}


def regular_absorbing_radius(params: AbsorbingParams, sigma: float, mu_tilde: float, elapsed: float = math.inf,
                             v_energy: float = 0.0) -> float:
    """``rho_0'^2`` for the fractional norm ``|A^{sigma/2} v|^2``.

    ``elapsed = t - tau`` and ``v_energy = int_tau^t ||v||^2`` enter only
    through the decaying ``K_3^2`` term; the default is the pullback limit.
    """
    p = params
    if not 0.0 <= sigma <= 0.5:
        raise ValueError(f"sigma must lie in [0, 1/2], got {sigma}")
    if not 0.0 < mu_tilde <= p.nu * p.lam1 * (1 + 1e-12):
        raise ValueError(f"mu_tilde must lie in (0, nu*lam1], got {mu_tilde}")
    C = p.constants.get("C")
    s2 = p.sup_norm**2
    K3 = ((2 * C / (p.nu * p.lam1 ** (2.0 / 3.0)) + 4 * C * s2) * v_energy
          + 2.0 / (p.nu * p.lam1) * s2**2 * p.perimeter + 2 * C * p.nu * p.perimeter * s2 / p.epsilon)
    q = p.q(mu_tilde)
    decay = 0.0 if math.isinf(elapsed) else math.exp(-mu_tilde * elapsed)
    return 1.0 + decay * K3 + 2 * C / p.nu * p.f_loc_sq_H + 2 * C * q / (p.nu * (1 - q)) * p.f_pb_sq_H


# -- ensembles ------------------------------------------------------------

def default_ladder(t, nu, lam1, depth=10):
    """``tau_j = t - 2^j/(nu lam1)``, ``j = 0..depth``."""
    return [t - 2.0**j / (nu * lam1) for j in range(depth + 1)]


def snap_ladder(t, taus, dt):
    """Move each ``tau`` onto the grid ``t - k dt`` (k >= 1); strictly decreasing result."""
    ks = sorted({max(1, int(round((t - tau) / dt))) for tau in taus})
    return [t - k * dt for k in ks], ks


def universe_gate(radius_sq: Callable[[float], float], taus, t, mu, threshold=1e-6) -> dict:
    """Tempered-universe membership on the ladder: ``e^{-mu(t - tau_j)} rho^2(tau_j)``.

    Must decrease along the ladder and fall below ``threshold`` at the deepest rung.
    """
    vals = np.array([math.exp(-mu * (t - tau)) * radius_sq(tau) for tau in taus])
    decreasing = bool(np.all(np.diff(vals) <= 1e-15 + 1e-12 * np.abs(vals[:-1])))
    ok = decreasing and vals[-1] < threshold
    return {"values": vals, "decreasing": decreasing, "deepest": float(vals[-1]), "ok": bool(ok)}


def sphere_cloud(m, radius, count, seed=0, modes=8):
    """``count`` points uniform on the sphere of given radius in the first ``min(m, modes)`` modes."""
    rng = np.random.default_rng(seed)
    k = min(m, modes)
    x = rng.standard_normal((count, k))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    out = np.zeros((count, m))
    out[:, :k] = radius * x
    return out


@dataclass
class PullbackEnsemble:
    t: float
    taus: list
    initial: np.ndarray  # (J, P, m)
    terminal: np.ndarray  # (J, P, m)
    radius_sq: list

    def __post_init__(self):
        if np.any(np.diff(self.taus) >= 0):
            raise ValueError("ladder must be strictly decreasing")
        if not np.all(np.isfinite(self.terminal)):
            raise ValueError("non-finite terminal states")


def run_ensemble(t, taus, cloud: Callable[[float], np.ndarray], cfg: SolverConfig, tensors, forcing=None,
                 radius_sq=None, mu=None) -> PullbackEnsemble:
    """Evolve ``cloud(tau_j)`` from every rung to ``t`` in a single batched sweep."""
    taus, ks = snap_ladder(t, taus, cfg.dt)
    if radius_sq is not None and mu is not None:
        gate = universe_gate(radius_sq, taus, t, mu)
        if not gate["ok"]:
            raise ValueError(f"initial radius profile is outside the tempered universe "
                             f"(deepest weighted radius {gate['deepest']:.3g}, decreasing={gate['decreasing']})")
    init = np.stack([np.atleast_2d(cloud(tau)) for tau in taus])
    J, P, m = init.shape
    kmax = ks[-1]
    start = {kmax - k: j for j, k in enumerate(ks)}  # step index at which rung j enters
    state = np.zeros_like(init)
    active = J
    tau0 = t - kmax * cfg.dt
    for step_idx in range(kmax):
        j = start.get(step_idx)
        if j is not None:
            state[j] = init[j]
            active = j
        sl = state[active:].reshape(-1, m)
        try:
            state[active:] = _advance(tau0 + step_idx * cfg.dt, sl, cfg.dt, cfg, tensors, forcing).reshape(-1, P, m)
        except DivergenceError as exc:
            raise DivergenceError(f"ensemble diverged (rungs from tau={taus[active]:.6g})", exc.t) from exc
    r2 = [float(radius_sq(tau)) if radius_sq else float(np.max(np.sum(init[j] ** 2, -1))) for j, tau in enumerate(taus)]
    return PullbackEnsemble(t=t, taus=taus, initial=init, terminal=state, radius_sq=r2)


def verify_absorption(ens: PullbackEnsemble, params: AbsorbingParams, radius_fn=None) -> dict:
    """Find the shallowest rung from which every deeper rung lies inside ``rho_0^2(t)``."""
    rho = (radius_fn or absorbing_radius)(params)
    norms = np.max(np.sum(ens.terminal**2, axis=-1), axis=-1)
    inside = norms <= rho
    j0 = None
    for j in range(len(ens.taus) - 1, -1, -1):
        if inside[j]:
            j0 = j
        else:
            break
    violations = []
    for j in np.flatnonzero(~inside):
        violations.append({"tau": ens.taus[j], "max_norm_sq": float(norms[j]), "rho0_sq": rho,
                           "envelope": gronwall_bound(params, ens.radius_sq[j], ens.t - ens.taus[j])})
    # once a rung is absorbed, every deeper rung must be too
    first = int(np.argmax(inside)) if np.any(inside) else len(inside)
    monotone = bool(np.all(inside[first:]))
    return {"rho0_sq": rho, "norms_sq": norms.tolist(), "taus": list(ens.taus),
            "tau0": None if j0 is None else ens.taus[j0], "index0": j0, "violations": violations,
            "monotone": monotone,
            "verdict": "absorbed" if j0 is not None else "not absorbed at ladder depth"}


# -- fibers ---------------------------------------------------------------

def hausdorff_semidistance(A, B) -> float:
    """``max_{a in A} min_{b in B} |a - b|``."""
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    if A.size == 0 or B.size == 0:
        raise ValueError("clouds must be nonempty")
    return float(np.max(np.min(cdist(A, B), axis=1)))


def hausdorff_distance(A, B) -> float:
    return max(hausdorff_semidistance(A, B), hausdorff_semidistance(B, A))


def prune_net(points, tol):
    """Greedy ``tol``-net of a point cloud (keeps first-seen order)."""
    pts = np.atleast_2d(points)
    keep = [pts[0]]
    for p in pts[1:]:
        if np.min(np.linalg.norm(np.array(keep) - p, axis=1)) > tol:
            keep.append(p)
    return np.array(keep)


@dataclass
class AttractorFiber:
    t: float
    points: np.ndarray
    converged: bool
    last_distance: float
    tau_reached: float
    tol: float
    distances: list = field(default_factory=list)

    @property
    def verdict(self):
        return "converged" if self.converged else "not converged"


def pullback_fiber(t, taus, cloud, cfg, tensors, forcing=None, tol=1e-6, radius_sq=None, mu=None) -> AttractorFiber:
    """Numerical pullback limit at ``t`` from a decreasing ladder of initial times."""
    if len(taus) < 3:
        raise ValueError("ladder depth must be at least 3")
    ens = run_ensemble(t, taus, cloud, cfg, tensors, forcing, radius_sq=radius_sq, mu=mu)
    clouds = ens.terminal
    dists = [hausdorff_distance(clouds[j], clouds[j + 1]) for j in range(len(ens.taus) - 1)]
    last = dists[-1]
    pts = prune_net(clouds[-1], tol)
    return AttractorFiber(t=t, points=pts, converged=bool(last < tol), last_distance=last,
                          tau_reached=ens.taus[-1], tol=tol, distances=dists)


def steady_state(tensors: GalerkinTensors, fbar, nu=None, a0=None, damping=0.5, tol=1e-13, maxiter=2000) -> dict:
    """Solve ``nu lam_k a_k + N_k(a) = fbar_k`` (``fbar`` excludes ``g_lift``).

    A damped fixed-point iteration ``a <- (1-w) a + w (fbar + g - N(a))/(nu lam)``
    gives the starting point; Newton (scipy ``root``) polishes it.
    """
    nu = tensors.nu if nu is None else nu
    lam = tensors.eigenvalues
    rhs = np.asarray(fbar, float) + tensors.g_lift
    a = np.zeros(tensors.m) if a0 is None else np.array(a0, float)
    it = 0
    for it in range(maxiter):
        new = (1 - damping) * a + damping * (rhs - apply_nonlinearity(tensors, a)) / (nu * lam)
        if not np.all(np.isfinite(new)):
            break
        done = np.linalg.norm(new - a) < 1e-10 * max(1.0, np.linalg.norm(new))
        a = new
        if done:
            break

    def F(x):
        return nu * lam * x + apply_nonlinearity(tensors, x) - rhs

    def JF(x):
        return np.diag(nu * lam) + jacobian_rows(tensors, x).T

    sol = optimize.root(F, a, jac=JF, tol=tol)
    x = sol.x if np.all(np.isfinite(sol.x)) else a
    res = float(np.linalg.norm(F(x)))
    # hybr reports "no progress" when started at a root, so judge by the residual
    return {"a": x, "residual": res, "converged": bool(np.isfinite(res) and res < 1e-9),
            "fixed_point_iters": it + 1}


def mwz_tail_profile(states, m_split=None, rel_eps=None) -> dict:
    """Max tail ``|(I - P_m) v|`` over a set of states for each split ``m``.

    Returns the table and, when ``rel_eps`` is given, the smallest ``m0`` with
    ``tail(m) < rel_eps * |v|`` for every ``m >= m0``.
    """
    S = np.atleast_2d(np.asarray(states, float))
    S = S.reshape(-1, S.shape[-1])
    m = S.shape[-1]
    splits = list(range(m + 1)) if m_split is None else sorted(m_split)
    # tail^2 after first k modes: reverse cumulative sum
    tail_sq = np.concatenate([np.cumsum((S**2)[:, ::-1], axis=1)[:, ::-1], np.zeros((len(S), 1))], axis=1)
    tails = np.sqrt(np.max(tail_sq, axis=0))
    table = [(k, float(tails[k])) for k in splits]
    out = {"table": table, "norm": float(np.max(np.linalg.norm(S, axis=1)))}
    if rel_eps is not None:
        ratio = np.max(np.sqrt(tail_sq) / np.maximum(np.linalg.norm(S, axis=1, keepdims=True), 1e-300), axis=0)
        ok = ratio < rel_eps
        m0 = None
        for k in range(m, -1, -1):
            if ok[k]:
                m0 = k
            else:
                break
        out["m0"] = m0
        out["rel_eps"] = rel_eps
    return out


# -- upper semicontinuity -------------------------------------------------

def autonomous_attractor(tensors, cfg, sigma0_forcing, t_spin=None, window=None, every=10, tol=1e-6,
                         a0=None) -> np.ndarray:
    """Approximate ``A_0`` from a long forward run of the autonomous system, pruned to a ``tol``-net."""
    lam1 = tensors.eigenvalues[0]
    t_spin = 20.0 / (cfg.nu * lam1) if t_spin is None else t_spin
    window = 4.0 / (cfg.nu * lam1) if window is None else window
    a0 = np.zeros(tensors.m) if a0 is None else a0
    s = evolve(ModalState(0.0, a0), t_spin, cfg, tensors, sigma0_forcing)
    _, tr = evolve(s, t_spin + window, cfg, tensors, sigma0_forcing, record_every=every)
    return prune_net(np.stack([x.a for x in tr]), tol)


def perturbed_forcing(sigma0, delta, sigma: ForcingSpec) -> ForcingSpec:
    return ForcingSpec.perturbed(sigma0, delta, sigma, name=f"perturbed(delta={delta:g})")


def upper_semicontinuity_curve(deltas, t, sigma0, sigma: ForcingSpec, cfg, tensors, taus, cloud, tol=1e-7,
                               mu=1.0, A0=None, horizon=None) -> dict:
    """Rows ``(delta, dist_H(A_delta(t), A_0))`` plus the trajectory-level ``C_0`` fits.

    The ``delta = 0`` row is ``A_0`` itself (distance exactly 0).
    """
    te = check_tempered(sigma, tensors.eigenvalues, mu, t, norm="H")
    if te.verdict != "member":
        raise ValueError(f"sigma(t) is not tempered in H (verdict {te.verdict})")
    base = ForcingSpec.stationary(sigma0)
    if A0 is None:
        A0 = autonomous_attractor(tensors, cfg, base, tol=tol)
    rows = []
    if horizon is None:
        horizon = 4.0 / (cfg.nu * tensors.eigenvalues[0])
    a_start = np.asarray(A0)[0]
    ref = evolve(ModalState(t - horizon, a_start), t, cfg, tensors, base, record_every=1)[1]
    ref_a = np.stack([s.a for s in ref])
    for d in deltas:
        if d == 0:
            rows.append({"delta": 0.0, "distance": 0.0, "converged": True, "C0": None, "verdict": "exact"})
            continue
        fd = perturbed_forcing(sigma0, d, sigma)
        fib = pullback_fiber(t, taus, cloud, cfg, tensors, fd, tol=tol)
        dist = hausdorff_semidistance(fib.points, A0)
        tr = evolve(ModalState(t - horizon, a_start), t, cfg, tensors, fd, record_every=1)[1]
        diff = np.max(np.sum((np.stack([s.a for s in tr]) - ref_a) ** 2, axis=-1))
        rows.append({"delta": float(d), "distance": dist, "converged": fib.converged, "C0": float(diff / d**2),
                     "verdict": "ok" if fib.converged else "inconclusive"})
    pos = [r for r in rows if r["delta"] > 0 and r["converged"] and r["distance"] > 0]
    exponent = None
    if len(pos) >= 2:
        x = np.log([r["delta"] for r in pos])
        y = np.log([r["distance"] for r in pos])
        exponent = float(np.polyfit(x, y, 1)[0])
    ordered = sorted(rows, key=lambda r: -r["delta"])
    dists = [r["distance"] for r in ordered]
    monotone = bool(np.all(np.diff(dists) <= 1e-15))
    c0 = [r["C0"] for r in sorted(pos, key=lambda r: -r["delta"])]
    c0_stable = bool(all(0.5 <= c0[i + 1] / c0[i] <= 2.0 for i in range(len(c0) - 1))) if len(c0) > 1 else None
    return {"rows": rows, "exponent": exponent, "monotone": monotone, "C0_stable": c0_stable, "A0": A0}


# -- export ---------------------------------------------------------------

def write_cloud_csv(path, t, points):
    points = np.atleast_2d(points)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "point"] + [f"a_{k + 1}" for k in range(points.shape[1])])
        for i, p in enumerate(points):
            w.writerow([repr(float(t)), i] + [repr(float(x)) for x in p])
    return path
