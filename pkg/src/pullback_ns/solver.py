"""Integrating-factor time stepping of the modal Galerkin system.

    da_k/dt = -nu lam_k a_k - N_k(a) + f_k(t) + g_lift[k]

The diagonal viscous part is applied exactly through ``E = exp(-nu lam dt)``;
the remainder ``R(t, a) = -N(a) + f(t) + g_lift`` uses a two-stage Heun
update, which keeps the scheme second order without linear solves.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DivergenceError
from .forcing import ForcingSpec, evaluate
from .operators import GalerkinTensors, apply_nonlinearity

SCHEMES = ("if-heun", "if-euler")


@dataclass(frozen=True)
class ModalState:
    t: float
    a: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        if not np.all(np.isfinite(a)):
            raise DivergenceError("non-finite modal state", self.t)
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "t", float(self.t))

    def h_norm(self):
        return np.linalg.norm(self.a, axis=-1)


@dataclass(frozen=True)
class SolverConfig:
    nu: float
    dt: float
    scheme: str = "if-heun"
    clip_threshold: float | None = 1e6

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")

    def with_dt(self, dt):
        return SolverConfig(self.nu, dt, self.scheme, self.clip_threshold)


def forcing_at(forcing: ForcingSpec | None, t, m):
    if forcing is None:
        return np.zeros(m)
    if forcing.m != m:
        raise ValueError(f"forcing has {forcing.m} modes, tensors have {m}")
    return evaluate(forcing, t)


def rhs_nonlinear(tensors, forcing, t, a):
    """``R(t, a) = -N(a) + f(t) + g_lift``."""
    return -apply_nonlinearity(tensors, a) + forcing_at(forcing, t, tensors.m) + tensors.g_lift


def _advance(t, a, dt, cfg, tensors, forcing):
    E = np.exp(-cfg.nu * tensors.eigenvalues * dt)
    k1 = rhs_nonlinear(tensors, forcing, t, a)
    if cfg.scheme == "if-euler":
        out = E * (a + dt * k1)
    else:
        stage = E * (a + dt * k1)
        out = E * a + 0.5 * dt * (E * k1 + rhs_nonlinear(tensors, forcing, t + dt, stage))
    bad = ~np.all(np.isfinite(out), axis=-1)
    if cfg.clip_threshold is not None:
        bad |= np.linalg.norm(np.nan_to_num(out, nan=np.inf), axis=-1) > cfg.clip_threshold
    if np.any(bad):
        raise DivergenceError("solution left the admissible range", t + dt)
    return out


def step(state: ModalState, cfg: SolverConfig, tensors: GalerkinTensors, forcing=None, dt=None) -> ModalState:
    """One integrating-factor step of size ``dt`` (default ``cfg.dt``).

    ``state.a`` may be a batch ``(P, m)``; all members share the time.
    """
    h = cfg.dt if dt is None else dt
    return ModalState(state.t + h, _advance(state.t, state.a, h, cfg, tensors, forcing))


def _schedule(tau, t, dt):
    span = t - tau
    if span < 0:
        raise ValueError(f"cannot evolve backwards from {tau} to {t}")
    n = int(math.floor(span / dt + 1e-9))
    rem = span - n * dt
    if rem <= 1e-12 * max(1.0, abs(t)):
        rem = 0.0
    return n, rem


def evolve(state: ModalState, t: float, cfg: SolverConfig, tensors: GalerkinTensors, forcing=None,
           record_every: int | None = None):
    """Realize ``U(t, tau) v_tau`` with ``tau = state.t``.

    Full steps of ``cfg.dt`` followed by one fractional step that lands on
    ``t`` exactly.  With ``record_every`` the function returns
    ``(final_state, trajectory)`` where the trajectory holds every
    ``record_every``-th full-step state (the landing state is appended).
    """
    tau = state.t
    n, rem = _schedule(tau, t, cfg.dt)
    a = np.array(state.a, dtype=float)
    traj = [state] if record_every else None
    for k in range(n):
        tk = tau + k * cfg.dt
        a = _advance(tk, a, cfg.dt, cfg, tensors, forcing)
        if record_every and (k + 1) % record_every == 0:
            traj.append(ModalState(tau + (k + 1) * cfg.dt, a))
    if rem > 0:
        a = _advance(tau + n * cfg.dt, a, rem, cfg, tensors, forcing)
    final = ModalState(t if (n or rem) else tau, a)
    if record_every:
        if traj[-1].t != final.t:
            traj.append(final)
        return final, traj
    return final


def trajectory(state, t, cfg, tensors, forcing=None, every=1):
    """Equally spaced states from ``state.t`` to ``t`` (every ``every`` steps)."""
    return evolve(state, t, cfg, tensors, forcing, record_every=every)[1]


def integrator_tolerance(state, t, cfg, tensors, forcing=None) -> float:
    """Global error estimate ``|U_dt(t,tau)v - U_{dt/2}(t,tau)v|``."""
    a1 = evolve(state, t, cfg, tensors, forcing).a
    a2 = evolve(state, t, cfg.with_dt(cfg.dt / 2), tensors, forcing).a
    return float(np.max(np.linalg.norm(np.atleast_2d(a1 - a2), axis=-1)))


def composition_discrepancy(state, s, t, cfg, tensors, forcing=None) -> float:
    """``|U(t,s)U(s,tau)v - U(t,tau)v|``."""
    direct = evolve(state, t, cfg, tensors, forcing).a
    two = evolve(evolve(state, s, cfg, tensors, forcing), t, cfg, tensors, forcing).a
    return float(np.max(np.linalg.norm(np.atleast_2d(direct - two), axis=-1)))


def energy_rhs(tensors, forcing, t, a):
    """``-b(v, psi, v) - b(psi, psi, v) + <f_bar, v>`` in modal form."""
    fbar = forcing_at(forcing, t, tensors.m) + tensors.g_lift
    quad = np.einsum("...i,ik,...k->...", a, tensors.C_vpsi, a)
    return -quad + np.sum((fbar - tensors.c_psipsi) * a, axis=-1)


def energy_identity_residual(traj, cfg: SolverConfig, tensors: GalerkinTensors, forcing=None) -> float:
    """Max residual of ``d|v|^2/dt + 2 nu ||v||^2 - 2 RHS`` over interior times.

    The derivative is a centered difference; the result is normalized by
    ``max(1, max |v|^2)``.
    """
    if len(traj) < 3:
        raise ValueError("energy identity residual needs at least 3 states")
    times = np.array([s.t for s in traj])
    gaps = np.diff(times)
    if not np.allclose(gaps, gaps[0], rtol=1e-8, atol=1e-12):
        raise ValueError("trajectory must be equally spaced")
    A = np.stack([s.a for s in traj])
    E = np.sum(A**2, axis=-1)
    lam = tensors.eigenvalues
    dE = (E[2:] - E[:-2]) / (2 * gaps[0])
    inner = A[1:-1]
    rhs = np.array([energy_rhs(tensors, forcing, t, a) for t, a in zip(times[1:-1], inner)])
    res = dE + 2 * cfg.nu * np.sum(lam * inner**2, axis=-1) - 2 * rhs
    return float(np.max(np.abs(res)) / max(1.0, float(np.max(E))))


def separation_probe(a1, a2, t_end, cfg, tensors, forcing=None, tau=0.0, every=1) -> dict:
    """Growth of ``|v1 - v2|`` relative to the Ladyzhenskaya proxy ``int |v2|^2 ||v2||^2``.

    Returns the fitted constant ``C = max_t log(sep(t)/sep(0)) / int_0^t |v2|^2 ||v2||^2``
    (0 when the separation never grows).
    """
    A = np.stack([np.asarray(a1, float), np.asarray(a2, float)])
    _, tr = evolve(ModalState(tau, A), t_end, cfg, tensors, forcing, record_every=every)
    lam = tensors.eigenvalues
    times = np.array([s.t for s in tr])
    sep = np.array([np.linalg.norm(s.a[0] - s.a[1]) for s in tr])
    v2 = np.stack([s.a[1] for s in tr])
    proxy = np.sum(v2**2, axis=-1) * np.sum(lam * v2**2, axis=-1)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (proxy[1:] + proxy[:-1]) * np.diff(times))])
    growth = np.log(np.maximum(sep, 1e-300) / sep[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where((growth > 0) & (cum > 0), growth / cum, 0.0)
    return {"times": times, "separation": sep, "proxy_integral": cum, "fitted_constant": float(np.max(ratios)),
            "finite": bool(np.all(np.isfinite(sep)))}


# -- export ---------------------------------------------------------------

def write_trajectory_csv(path, traj, eigenvalues):
    lam = np.asarray(eigenvalues)
    m = len(lam)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"a_{k + 1}" for k in range(m)] + ["|v|", "||v||"])
        for s in traj:
            a = s.a
            w.writerow([repr(s.t)] + [repr(float(x)) for x in a]
                       + [repr(float(np.linalg.norm(a))), repr(float(np.sqrt(np.sum(lam * a**2))))])
    return path


def run_manifest(cfg: SolverConfig, tensors: GalerkinTensors, forcing=None, extra=None) -> dict:
    return {
        "tool_version": __version__,
        "solver": asdict(cfg),
        "basis_id": tensors.basis_id,
        "flow_id": tensors.flow_id,
        "tensor_hash": tensors.content_hash(),
        "forcing": None if forcing is None else forcing.to_dict(),
        **(extra or {}),
    }


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")
