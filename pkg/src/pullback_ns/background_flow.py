"""Boundary-layer lift of tangential boundary velocity (Hopf-type background flow).

Boundary data are a tangential speed ``phi(s)`` along the boundary, with
arclength ``s`` in [0, 4) running counterclockwise from the corner (0, 0):
bottom, right, top, left.  Positive speed means counterclockwise motion.

The lift is ``psi = curl(eta_eps(D) * D * sum_i omega_i phi_i)`` where ``D``
is a smooth (R-function) distance to the boundary, ``omega_i`` a partition of
unity over the four sides, ``phi_i`` the side speed profiles and ``eta_eps``
a C2 cutoff equal to 1 for ``D < eps/3`` and 0 for ``D > eps``.
Because ``psi`` is a centered discrete curl, its centered divergence vanishes
at interior nodes to rounding; at boundary nodes its tangential component is
``phi`` up to O(h^2).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import integrate

from .constants import Constants
from .errors import GridMismatchError
from .spectral_basis import DomainGrid, StokesBasis

_SIDES = ("bottom", "right", "top", "left")


@dataclass(frozen=True)
class BoundaryData:
    """Tangential boundary speed ``phi(s)``; the normal component is identically zero."""

    tangential_speed: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"
    amplitude: float = 1.0

    def __call__(self, s):
        return np.asarray(self.tangential_speed(np.mod(np.asarray(s, dtype=float), 4.0)), dtype=float)

    @cached_property
    def sup_norm(self) -> float:
        s = np.linspace(0.0, 4.0, 8001)
        return float(np.max(np.abs(self(s))))

    @cached_property
    def l2_norm(self) -> float:
        total = 0.0
        for k in range(4):
            val, _ = integrate.quad(lambda s: float(self(s)) ** 2, k, k + 1, limit=200)
            total += val
        return float(np.sqrt(total))

    @property
    def is_zero(self) -> bool:
        return self.sup_norm == 0.0

    def scaled(self, c: float) -> "BoundaryData":
        f = self.tangential_speed
        return BoundaryData(lambda s: c * f(s), name=self.name, amplitude=c * self.amplitude)

    def describe(self) -> dict:
        return {"profile": self.name, "amplitude": self.amplitude}

    @classmethod
    def zero(cls):
        return cls(lambda s: np.zeros_like(s), name="zero", amplitude=0.0)

    @classmethod
    def constant(cls, speed: float = 1.0):
        return cls(lambda s: np.full_like(s, speed, dtype=float), name="constant", amplitude=speed)

    @classmethod
    def smooth(cls, amplitude: float = 1.0):
        """``amplitude * sin^2(pi s)``: same profile on every side, vanishing at corners."""
        return cls(lambda s: amplitude * np.sin(np.pi * s) ** 2, name="smooth", amplitude=amplitude)

    @classmethod
    def lid(cls, amplitude: float = 1.0):
        """Top wall moving in +x with profile ``16 x^2 (1-x)^2``; other walls at rest."""

        def speed(s):
            s = np.asarray(s, dtype=float)
            x = 3.0 - s  # top side: s in [2, 3) maps to x = 1 .. 0
            prof = 16.0 * x**2 * (1.0 - x) ** 2
            # counterclockwise tangent on the top wall points in -x
            return np.where((s >= 2.0) & (s < 3.0), -amplitude * prof, 0.0)

        return cls(speed, name="lid", amplitude=amplitude)

    @classmethod
    def named(cls, profile: str, amplitude: float):
        makers = {"zero": lambda a: cls.zero(), "constant": cls.constant, "smooth": cls.smooth, "lid": cls.lid}
        if profile not in makers:
            raise ValueError(f"unknown boundary profile {profile!r}; choose from {sorted(makers)}")
        return makers[profile](amplitude)


def cutoff(d, eps):
    """C2 polynomial bump: 1 for d <= eps/3, 0 for d >= eps."""
    d = np.asarray(d, dtype=float)
    r = np.clip((d - eps / 3.0) / (2.0 * eps / 3.0), 0.0, 1.0)
    return 1.0 - r**3 * (10.0 - 15.0 * r + 6.0 * r**2)


def _side_distances(X, Y):
    # signed distances to bottom, right, top, left lines; positive inside
    return np.stack([Y, 1.0 - X, 1.0 - Y, X])


def _side_arclengths(X, Y):
    return np.stack([X, 1.0 + Y, 3.0 - X, 4.0 - Y])


def smooth_distance(rho):
    """R-function distance ``(sum rho_i^-2)^(-1/2)`` and the matching side weights.

    Equals the side distance near a side (unit normal derivative) and behaves
    like ``xy/r`` at a corner.  Written with products so boundary nodes are exact.
    """
    sq = rho**2
    partial = np.stack([np.prod(np.delete(sq, i, axis=0), axis=0) for i in range(4)])
    total = partial.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        D = np.where(total > 0, np.prod(np.abs(rho), axis=0) / np.sqrt(total), 0.0)
        weights = np.where(total > 0, partial / total, 0.0)
    D = np.where(rho.min(axis=0) < 0, -D, D)
    return D, weights


@dataclass(frozen=True, eq=False)
class BackgroundFlow:
    grid: DomainGrid
    boundary: BoundaryData
    epsilon: float
    psi: np.ndarray          # (2, n+2, n+2) including boundary nodes
    layer_mask: np.ndarray   # (n+2, n+2) bool
    F_field: np.ndarray      # (2, n, n): discrete Laplacian of psi at interior nodes
    distance: np.ndarray = field(repr=False)  # (n+2, n+2)

    @property
    def sup_psi(self) -> float:
        return float(np.max(np.linalg.norm(self.psi, axis=0)))

    @property
    def layer_width(self) -> float:
        """Largest true boundary distance reached by the layer mask."""
        return float(self.distance[self.layer_mask].max(initial=0.0))

    @property
    def psi_interior(self):
        return self.psi[:, 1:-1, 1:-1]

    def psi_gradient(self):
        """Centered gradient of psi at interior nodes, shape (2 comp, 2 dir, n, n)."""
        p, h = self.psi, self.grid.h
        dx = (p[:, 1:-1, 2:] - p[:, 1:-1, :-2]) / (2 * h)
        dy = (p[:, 2:, 1:-1] - p[:, :-2, 1:-1]) / (2 * h)
        return np.stack([dx, dy], axis=1)

    def divergence(self):
        g = self.psi_gradient()
        return g[0, 0] + g[1, 1]

    @property
    def F_norm(self) -> float:
        """Grid L2 norm of ``Lap psi``."""
        return float(np.sqrt(np.sum(self.F_field**2)) * self.grid.h)

    @property
    def weighted_gradient(self) -> float:
        """``max |grad psi(x)| dist(x, boundary)`` over interior nodes."""
        g = self.psi_gradient()
        return float(np.max(np.sqrt(np.sum(g**2, axis=(0, 1))) * self.distance[1:-1, 1:-1]))

    def C4_estimate(self) -> float:
        """Empirical ``(sup|psi| + weighted gradient) / ||phi||_inf`` (0 for zero data)."""
        if self.boundary.is_zero:
            return 0.0
        return (self.sup_psi + self.weighted_gradient) / self.boundary.sup_norm

    @cached_property
    def flow_id(self) -> str:
        hsh = hashlib.sha256()
        hsh.update(np.array([self.grid.n_interior, self.epsilon]).tobytes())
        hsh.update(self.psi.tobytes())
        return hsh.hexdigest()[:16]


def build_background_flow(grid: DomainGrid, boundary: BoundaryData, eps: float) -> BackgroundFlow:
    """Divergence-free lift of ``boundary`` supported in an ``eps`` boundary layer."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"layer width eps must lie in (0, 1/2), got {eps}")
    h = grid.h
    if eps < 3.0 * h:
        raise ValueError(f"eps={eps:.4g} is under 3h={3 * h:.4g}: the layer is unresolved; refine the grid")
    X, Y = grid.full_coords(pad=1)
    rho = _side_distances(X, Y)
    D, weights = smooth_distance(rho)
    phi = np.stack([boundary(si) for si in _side_arclengths(X, Y)])
    zeta = np.sum(weights * phi, axis=0) * D * cutoff(np.maximum(D, 0.0), eps)
    u = (zeta[2:, 1:-1] - zeta[:-2, 1:-1]) / (2 * h)
    v = -(zeta[1:-1, 2:] - zeta[1:-1, :-2]) / (2 * h)
    psi = np.stack([u, v])
    dist = np.maximum(rho.min(axis=0), 0.0)[1:-1, 1:-1]
    mask = D[1:-1, 1:-1] < eps + h
    lap = (psi[:, 1:-1, 2:] + psi[:, 1:-1, :-2] + psi[:, 2:, 1:-1] + psi[:, :-2, 1:-1]
           - 4.0 * psi[:, 1:-1, 1:-1]) / h**2
    for arr in (psi, mask, lap, dist):
        arr.setflags(write=False)
    return BackgroundFlow(grid=grid, boundary=boundary, epsilon=float(eps), psi=psi,
                          layer_mask=mask, F_field=lap, distance=dist)


def boundary_trace_error(flow: BackgroundFlow) -> float:
    """Max deviation of psi on boundary nodes from ``phi * tangent`` (corners excluded)."""
    n = flow.grid.n_interior
    h = flow.grid.h
    t = np.arange(1, n + 1) * h
    b = flow.boundary
    err = [
        np.abs(flow.psi[0, 0, 1:-1] - b(t)).max(),                 # bottom, tangent +x
        np.abs(flow.psi[1, 1:-1, -1] - b(1.0 + t)).max(),          # right, tangent +y
        np.abs(flow.psi[0, -1, 1:-1] + b(2.0 + (1.0 - t))).max(),  # top, tangent -x
        np.abs(flow.psi[1, 1:-1, 0] + b(3.0 + (1.0 - t))).max(),   # left, tangent -y
    ]
    normal = [np.abs(flow.psi[1, 0, 1:-1]).max(), np.abs(flow.psi[0, 1:-1, -1]).max(),
              np.abs(flow.psi[1, -1, 1:-1]).max(), np.abs(flow.psi[0, 1:-1, 0]).max()]
    return float(max(max(err), max(normal)))


def _check_same_grid(flow, basis):
    if flow.grid != basis.grid:
        raise GridMismatchError(
            f"flow grid n={flow.grid.n_interior} differs from basis grid n={basis.grid.n_interior}")


def background_residuals(flow: BackgroundFlow, basis: StokesBasis, nu: float) -> dict:
    """Modal lift forcing ``nu (Lap psi, w_k)`` and scalar size diagnostics of psi.

    Returns ``laplacian_projection`` (length-m vector), ``F_norm`` (grid L2 norm
    of ``Lap psi``) and ``weighted_gradient`` (``max |grad psi| dist(x, boundary)``).
    """
    _check_same_grid(flow, basis)
    h2 = flow.grid.h**2
    W = basis.velocities.reshape(basis.m, -1)
    proj = nu * (W @ flow.F_field.ravel()) * h2
    return {"laplacian_projection": proj, "F_norm": flow.F_norm, "weighted_gradient": flow.weighted_gradient}


def pressure_gradient_projection(basis: StokesBasis, scalar_full) -> np.ndarray:
    """``(grad s, w_k)`` for a scalar on the full grid; vanishes for solenoidal test fields."""
    s = np.asarray(scalar_full, dtype=float)
    n = basis.grid.n_interior
    if s.shape != (n + 2, n + 2):
        raise GridMismatchError(f"scalar must have shape {(n + 2, n + 2)}")
    h = basis.grid.h
    gx = (s[1:-1, 2:] - s[1:-1, :-2]) / (2 * h)
    gy = (s[2:, 1:-1] - s[:-2, 1:-1]) / (2 * h)
    grad = np.stack([gx, gy])
    return basis.velocities.reshape(basis.m, -1) @ grad.ravel() * h**2


def hardy_constant_probe(basis: StokesBasis) -> float:
    """Largest ratio ``int |v|^2/dist^2 / ||v||^2`` over the modal space (empirical Hardy C3)."""
    X, Y = basis.grid.interior_coords()
    d = np.minimum(np.minimum(X, 1 - X), np.minimum(Y, 1 - Y))
    W = basis.velocities.reshape(basis.m, 2, -1)
    Q = np.einsum("jcx,kcx,x->jk", W, W, 1.0 / d.ravel() ** 2) * basis.grid.h**2
    s = 1.0 / np.sqrt(basis.eigenvalues)
    return float(np.linalg.eigvalsh(Q * np.outer(s, s)).max())


def calibrate_constants(flow: BackgroundFlow, basis: StokesBasis,
                        base: Constants | None = None) -> Constants:
    """Measure C2 (support factor), C3 (Hardy) and C4 (sup bound of psi) on this flow."""
    base = base or Constants()
    _check_same_grid(flow, basis)
    vals = {"C2": flow.layer_width / flow.epsilon, "C3": hardy_constant_probe(basis)}
    if not flow.boundary.is_zero:
        vals["C4"] = flow.C4_estimate()
    tag = f"calibrated n={flow.grid.n_interior} m={basis.m} eps={flow.epsilon:g} profile={flow.boundary.name}"
    return base.with_values(tag, **vals)


def verify_layer_constraint(flow: BackgroundFlow, nu: float, constants: Constants,
                            safety: float = 1.0) -> dict:
    """Check ``C2 C3 C4 eps ||phi||_inf <= nu/4`` (times ``safety``)."""
    lhs = (constants.get("C2") * constants.get("C3") * constants.get("C4")
           * flow.epsilon * flow.boundary.sup_norm)
    rhs = safety * nu / 4.0
    return {"lhs": float(lhs), "rhs": float(rhs), "ok": bool(lhs <= rhs)}


def layer_constraint_value(eps: float, sup_norm: float, nu: float, constants: Constants,
                           safety: float = 1.0) -> dict:
    """Arithmetic form of :func:`verify_layer_constraint` (usable in the ``eps -> 0`` limit)."""
    lhs = constants.get("C2") * constants.get("C3") * constants.get("C4") * eps * sup_norm
    return {"lhs": float(lhs), "rhs": float(safety * nu / 4.0), "ok": bool(lhs <= safety * nu / 4.0)}
