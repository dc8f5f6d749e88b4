"""Non-autonomous modal forcing specifications and forcing-class checkers.

Every closed-form variant carries a tail model describing ``||f(t)||^2`` as
``t -> -inf``.  The checkers combine a numeric scan over a geometric ladder
of times ``s = tau - 2^j`` with the analytic tail, and return ``inconclusive``
when no tail model can certify the truncation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

GAUSS_NODES = 24
_gx, _gw = np.polynomial.legendre.leggauss(GAUSS_NODES)

MEMBER, NOT_MEMBER, INCONCLUSIVE = "member", "not_member", "inconclusive"


@dataclass(frozen=True)
class TailModel:
    """Behaviour of the forcing as ``t -> -inf``.

    kind: ``zero``; ``constant`` (``f`` constant in time); ``bounded``
    (``sup_t ||f||`` finite, bound given per norm at evaluation time);
    ``exponential`` (``f = e^{rate t} base``).
    """

    kind: str
    rate: float = 0.0


@dataclass(frozen=True)
class ForcingSpec:
    variant: str
    m: int
    sigma0: tuple = ()
    delta: float = 0.0
    amplitudes: tuple = ()
    frequencies: tuple = ()
    phases: tuple = ()
    rate: float = 0.0
    base: tuple = ()
    times: tuple = ()
    values: tuple = ()
    extrapolation: str = "reject"
    name: str = ""
    tail_model: TailModel | None = field(default=None)

    # -- constructors -------------------------------------------------
    @classmethod
    def zero(cls, m, name="zero"):
        return cls("zero", m, name=name, tail_model=TailModel("zero"))

    @classmethod
    def stationary(cls, sigma0, name="stationary"):
        s = tuple(float(x) for x in sigma0)
        return cls("stationary", len(s), sigma0=s, name=name, tail_model=TailModel("constant"))

    @classmethod
    def quasiperiodic(cls, amplitudes, frequencies, phases=None, name="quasiperiodic"):
        amp = tuple(float(x) for x in amplitudes)
        m = len(amp)
        ph = tuple(float(x) for x in (phases if phases is not None else np.zeros(m)))
        fr = tuple(float(x) for x in frequencies)
        if not len(fr) == len(ph) == m:
            raise ValueError("amplitudes, frequencies and phases need one entry per mode")
        return cls("quasiperiodic", m, amplitudes=amp, frequencies=fr, phases=ph, name=name,
                   tail_model=TailModel("bounded"))

    @classmethod
    def perturbed(cls, sigma0, delta, perturbation: "ForcingSpec", name="perturbed"):
        """``sigma0 + delta * sigma(t)`` with ``sigma`` a quasiperiodic spec."""
        if perturbation.variant != "quasiperiodic":
            raise ValueError("the perturbation sigma(t) must be quasiperiodic")
        s = tuple(float(x) for x in sigma0)
        if len(s) != perturbation.m:
            raise ValueError("sigma0 and sigma(t) must have the same length")
        return cls("perturbed", len(s), sigma0=s, delta=float(delta), amplitudes=perturbation.amplitudes,
                   frequencies=perturbation.frequencies, phases=perturbation.phases, name=name,
                   tail_model=TailModel("bounded" if delta else "constant"))

    @classmethod
    def exponential_envelope(cls, rate, base, name=None):
        b = tuple(float(x) for x in base)
        return cls("exponential_envelope", len(b), rate=float(rate), base=b,
                   name=name or f"exp({rate:g}t)", tail_model=TailModel("exponential", float(rate)))

    @classmethod
    def sampled(cls, times, values, extrapolation="reject", name="sampled"):
        t = tuple(float(x) for x in times)
        v = np.asarray(values, dtype=float)
        if v.ndim != 2 or v.shape[0] != len(t) or np.any(np.diff(t) <= 0):
            raise ValueError("sampled forcing needs strictly increasing times and a (len(times), m) array")
        if extrapolation not in ("reject", "hold", "periodic"):
            raise ValueError(f"unknown extrapolation rule {extrapolation!r}")
        tail = TailModel("bounded") if extrapolation in ("hold", "periodic") else None
        return cls("sampled", v.shape[1], times=t, values=tuple(map(tuple, v)), extrapolation=extrapolation,
                   name=name, tail_model=tail)

    # -- serialization ------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["tail_model"] = None if self.tail_model is None else asdict(self.tail_model)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ForcingSpec":
        d = dict(d)
        tm = d.pop("tail_model", None)
        conv = {k: (tuple(map(tuple, v)) if k == "values" else tuple(v)) if isinstance(v, list) else v
                for k, v in d.items()}
        return cls(**conv, tail_model=None if tm is None else TailModel(**tm))


def evaluate(spec: ForcingSpec, t):
    """Modal forcing at time(s) ``t``: shape ``(m,)`` for scalar ``t``, else ``(len(t), m)``."""
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    m = spec.m
    v = spec.variant
    if v == "zero":
        out = np.zeros((t.size, m))
    elif v == "stationary":
        out = np.broadcast_to(np.array(spec.sigma0), (t.size, m)).copy()
    elif v in ("quasiperiodic", "perturbed"):
        A, w, p = (np.array(x) for x in (spec.amplitudes, spec.frequencies, spec.phases))
        out = A * np.cos(np.outer(t, w) + p)
        if v == "perturbed":
            out = np.array(spec.sigma0) + spec.delta * out
    elif v == "exponential_envelope":
        out = np.exp(spec.rate * t)[:, None] * np.array(spec.base)
    elif v == "sampled":
        ts = np.array(spec.times)
        vals = np.array(spec.values)
        tt = t
        if spec.extrapolation == "reject":
            if np.any((t < ts[0]) | (t > ts[-1])):
                raise ValueError(f"time outside sampled range [{ts[0]}, {ts[-1]}] and extrapolation is 'reject'")
        elif spec.extrapolation == "periodic":
            tt = ts[0] + np.mod(t - ts[0], ts[-1] - ts[0])
        out = np.stack([np.interp(tt, ts, vals[:, k]) for k in range(m)], axis=-1)
    else:
        raise ValueError(f"unknown forcing variant {v!r}")
    return out[0] if scalar else out


def modal_forcing(spec: ForcingSpec, t: float):
    """``f_k(t)`` for a single time."""
    return evaluate(spec, float(t))


def _weights(eigenvalues, norm):
    lam = np.asarray(eigenvalues, dtype=float)
    if norm == "V'":
        return 1.0 / lam
    if norm == "H":
        return np.ones_like(lam)
    raise ValueError(f"norm must be \"V'\" or 'H', got {norm!r}")


def _eig(basis):
    return basis.eigenvalues if hasattr(basis, "eigenvalues") else np.asarray(basis)


def dual_norm(basis, f) -> float:
    """``||f||_{V'} = sqrt(sum_k f_k^2 / lam_k)``."""
    f = np.asarray(f, dtype=float)
    lam = _eig(basis)
    if f.shape[-1] != len(lam):
        raise ValueError("forcing length does not match the basis")
    out = np.sqrt(np.sum(f**2 / lam, axis=-1))
    return float(out) if out.ndim == 0 else out


def sq_norm(spec: ForcingSpec, basis, t, norm="V'"):
    """``||f(t)||_X^2`` for time array ``t``."""
    w = _weights(_eig(basis), norm)
    return np.sum(w * evaluate(spec, np.atleast_1d(t)) ** 2, axis=-1)


def sup_sq_bound(spec: ForcingSpec, basis, norm="V'") -> float:
    """Rigorous bound on ``sup_t ||f(t)||_X^2`` for bounded/constant variants (inf otherwise)."""
    w = _weights(_eig(basis), norm)
    v = spec.variant
    if v == "zero":
        return 0.0
    if v == "stationary":
        return float(np.sum(w * np.array(spec.sigma0) ** 2))
    if v in ("quasiperiodic", "perturbed"):
        amp = math.sqrt(float(np.sum(w * np.array(spec.amplitudes) ** 2)))
        if v == "quasiperiodic":
            return amp**2
        s0 = math.sqrt(float(np.sum(w * np.array(spec.sigma0) ** 2)))
        return (s0 + abs(spec.delta) * amp) ** 2
    if v == "sampled" and spec.extrapolation in ("hold", "periodic"):
        return float(np.max(np.sum(w * np.array(spec.values) ** 2, axis=-1)))
    if v == "exponential_envelope" and spec.rate == 0.0:
        return float(np.sum(w * np.array(spec.base) ** 2))
    return math.inf


def integrate(spec, basis, a, b, norm="V'", weight=None):
    """``int_a^b weight(r) ||f(r)||^2 dr`` by composite Gauss-Legendre on unit panels."""
    if b <= a:
        return 0.0
    panels = max(1, int(math.ceil(b - a)))
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    r = (mid[:, None] + half[:, None] * _gx).ravel()
    vals = sq_norm(spec, basis, r, norm)
    if weight is not None:
        vals = vals * weight(r)
    return float(np.sum(vals.reshape(panels, -1) * _gw * half[:, None]))


@dataclass
class ForcingClassReport:
    class_name: str
    value: float
    verdict: str
    truncation: dict
    name: str = ""

    def as_row(self):
        return {"spec": self.name, "class": self.class_name, "value": self.value, "verdict": self.verdict,
                "truncation": self.truncation.get("method", "")}


def ladder(tau, windows):
    return np.array([tau] + [tau - 2.0**j for j in range(windows + 1)])


def _scan_points(tau, windows, dense_span=8.0, dense_step=0.125):
    dense = tau - np.arange(0.0, dense_span + 1e-12, dense_step)
    return np.unique(np.concatenate([ladder(tau, windows), dense]))[::-1]


def _exp_parts(spec, basis, norm):
    w = _weights(_eig(basis), norm)
    return spec.rate, float(np.sum(w * np.array(spec.base) ** 2))


def check_translation_bounded(spec: ForcingSpec, basis, tau: float, windows: int = 10,
                              norm="V'") -> ForcingClassReport:
    """``sup_{s <= tau} int_{s-1}^{s} ||f(r)||^2 dr`` over a geometric ladder plus analytic tail."""
    if windows < 10:
        raise ValueError("windows must be >= 10")
    tm = spec.tail_model
    pts = _scan_points(tau, windows)
    cls = "translation_bounded"

    def numeric():
        if not _finite_ok(spec, pts):
            return math.inf
        return max(integrate(spec, basis, s - 1.0, s, norm) for s in pts)

    if tm is None:
        return ForcingClassReport(cls, numeric(), INCONCLUSIVE, {"method": "numeric ladder, no tail model",
                                                               "depth": float(tau - pts.min())}, spec.name)
    if tm.kind == "exponential" and tm.rate != 0.0:
        k, b2 = _exp_parts(spec, basis, norm)
        if k < 0:
            return ForcingClassReport(cls, math.inf, NOT_MEMBER,
                                      {"method": "analytic: window integral grows like exp(2 rate s) as s -> -inf"},
                                      spec.name)
        value = b2 * (math.exp(2 * k * tau) - math.exp(2 * k * (tau - 1))) / (2 * k)
        return ForcingClassReport(cls, value, MEMBER, {"method": "analytic (increasing in s)", "numeric": numeric()},
                                  spec.name)
    bound = sup_sq_bound(spec, basis, norm)
    if tm.kind in ("zero", "constant") or (tm.kind == "exponential" and tm.rate == 0.0):
        return ForcingClassReport(cls, bound, MEMBER, {"method": "analytic constant integrand"}, spec.name)
    return ForcingClassReport(cls, numeric(), MEMBER if math.isfinite(bound) else INCONCLUSIVE,
                              {"method": "numeric ladder + bounded tail", "tail_bound": bound}, spec.name)


def _finite_ok(spec, pts):
    if spec.variant == "sampled" and spec.extrapolation == "reject":
        ts = spec.times
        return pts.min() - 1.0 >= ts[0] and pts.max() <= ts[-1]
    return True


def _tail_length(bound, mu, tol):
    if bound <= 0:
        return 1.0
    return max(1.0, math.log(max(bound / (mu * tol), math.e)) / mu)


def check_tempered(spec: ForcingSpec, basis, mu: float, tau: float, windows: int = 10, norm="V'",
                   tol: float = 1e-10) -> ForcingClassReport:
    """``sup_{s <= tau} int_{-inf}^{s} e^{mu (r - s)} ||f(r)||^2 dr``."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    tm = spec.tail_model
    cls = "tempered"
    if tm is None:
        pts = _scan_points(tau, windows)
        return ForcingClassReport(cls, math.nan, INCONCLUSIVE,
                                  {"method": "no tail model; improper integral cannot be truncated",
                                   "depth": float(tau - pts.min())}, spec.name)
    if tm.kind == "exponential" and tm.rate != 0.0:
        k, b2 = _exp_parts(spec, basis, norm)
        if mu + 2 * k <= 0:
            return ForcingClassReport(cls, math.inf, NOT_MEMBER,
                                      {"method": "analytic: integral diverges at -inf (mu + 2 rate <= 0)"}, spec.name)
        if k < 0:
            return ForcingClassReport(cls, math.inf, NOT_MEMBER,
                                      {"method": "analytic: finite for each s but unbounded as s -> -inf"}, spec.name)
        return ForcingClassReport(cls, b2 * math.exp(2 * k * tau) / (mu + 2 * k), MEMBER,
                                  {"method": "analytic"}, spec.name)
    bound = sup_sq_bound(spec, basis, norm)
    if tm.kind in ("zero", "constant") or (tm.kind == "exponential" and tm.rate == 0.0):
        return ForcingClassReport(cls, bound / mu, MEMBER, {"method": "analytic constant integrand"}, spec.name)
    L = _tail_length(bound, mu, tol)
    vals = [integrate(spec, basis, s - L, s, norm, weight=lambda r, s=s: np.exp(mu * (r - s)))
            for s in _scan_points(tau, windows)]
    tail = bound * math.exp(-mu * L) / mu
    return ForcingClassReport(cls, max(vals), MEMBER if math.isfinite(bound) else INCONCLUSIVE,
                              {"method": "numeric ladder + bounded tail", "window": L, "tail_bound": tail}, spec.name)


def tempered_integral(spec, basis, mu, s, norm="V'", tol=1e-12) -> float:
    """``int_{-inf}^{s} e^{-mu (s - r)} ||f(r)||^2 dr`` at one time ``s`` (inf if divergent)."""
    tm = spec.tail_model
    if tm is None:
        raise ValueError("tail model required for an improper integral")
    if tm.kind == "exponential" and tm.rate != 0.0:
        k, b2 = _exp_parts(spec, basis, norm)
        return math.inf if mu + 2 * k <= 0 else b2 * math.exp(2 * k * s) / (mu + 2 * k)
    bound = sup_sq_bound(spec, basis, norm)
    if tm.kind in ("zero", "constant") or (tm.kind == "exponential" and tm.rate == 0.0):
        return bound / mu
    L = _tail_length(bound, mu, tol)
    return integrate(spec, basis, s - L, s, norm, weight=lambda r: np.exp(mu * (r - s)))


def check_uniformly_tempered(spec: ForcingSpec, basis, mu: float, tau: float, norm="V'",
                             tol: float = 1e-10) -> ForcingClassReport:
    """``int_{-inf}^{tau} e^{mu s} ||f(s)||^2 ds``."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    tm = spec.tail_model
    cls = "uniformly_tempered"
    if tm is None:
        return ForcingClassReport(cls, math.nan, INCONCLUSIVE, {"method": "no tail model"}, spec.name)
    if tm.kind == "exponential" and tm.rate != 0.0:
        k, b2 = _exp_parts(spec, basis, norm)
        if mu + 2 * k <= 0:
            return ForcingClassReport(cls, math.inf, NOT_MEMBER,
                                      {"method": "analytic: integral diverges at -inf (mu + 2 rate <= 0)"}, spec.name)
        return ForcingClassReport(cls, b2 * math.exp((mu + 2 * k) * tau) / (mu + 2 * k), MEMBER,
                                  {"method": "analytic"}, spec.name)
    bound = sup_sq_bound(spec, basis, norm)
    if tm.kind in ("zero", "constant") or (tm.kind == "exponential" and tm.rate == 0.0):
        return ForcingClassReport(cls, math.exp(mu * tau) * bound / mu, MEMBER,
                                  {"method": "analytic constant integrand"}, spec.name)
    L = _tail_length(bound, mu, tol)
    val = integrate(spec, basis, tau - L, tau, norm, weight=lambda r: np.exp(mu * r))
    tail = bound * math.exp(mu * (tau - L)) / mu
    return ForcingClassReport(cls, val, MEMBER if math.isfinite(bound) else INCONCLUSIVE,
                              {"method": "numeric window + bounded tail", "window": L, "tail_bound": tail}, spec.name)


def window_decomposition_check(spec, basis, mu, t, n0=1, h=1.0, norm="V'") -> dict:
    """Geometric-series bound used for the absorbing radius.

    ``int_{-inf}^t e^{-mu(t-s)} ||f||^2 <= int_{t-n0 h}^t ||f||^2
    + e^{-mu n0 h} / (1 - e^{-mu n0 h}) ||f||_pb^2``.
    """
    lhs = tempered_integral(spec, basis, mu, t, norm)
    pb = check_translation_bounded(spec, basis, t, norm=norm).value
    q = math.exp(-mu * n0 * h)
    rhs = integrate(spec, basis, t - n0 * h, t, norm) + q / (1.0 - q) * pb
    vacuous = not math.isfinite(rhs)
    return {"lhs": lhs, "rhs": rhs, "holds": bool(vacuous or lhs <= rhs * (1 + 1e-12) + 1e-14),
            "vacuous": vacuous}


def class_equivalence_audit(specs, basis, mu: float = 1.0, tau: float = 0.0, norm="V'", n0=1, h=1.0):
    """Per-spec verdicts of the three checkers plus consistency flags.

    ``agree``: translation-bounded and tempered verdicts coincide.
    ``implication_ok``: uniformly tempered membership implies both others.
    ``window_ok``: the window-decomposition bound holds.
    """
    rows = []
    for spec in specs:
        if spec.tail_model is None:
            raise ValueError(f"spec {spec.name!r} has no tail model")
        tb = check_translation_bounded(spec, basis, tau, norm=norm)
        te = check_tempered(spec, basis, mu, tau, norm=norm)
        ut = check_uniformly_tempered(spec, basis, mu, tau, norm=norm)
        wd = window_decomposition_check(spec, basis, mu, tau, n0=n0, h=h, norm=norm)
        implication = ut.verdict != MEMBER or (tb.verdict == MEMBER and te.verdict == MEMBER)
        rows.append({"spec": spec.name, "translation_bounded": tb.verdict, "tempered": te.verdict,
                     "uniformly_tempered": ut.verdict, "pb_value": tb.value, "tempered_value": te.value,
                     "ut_value": ut.value, "agree": tb.verdict == te.verdict, "implication_ok": implication,
                     "window_ok": wd["holds"], "defect": not (tb.verdict == te.verdict and implication and wd["holds"])})
    return rows


def forcing_library(m: int, amplitude: float = 1.0):
    """The five-spec audit library: zero, stationary, e^t, e^-t and quasiperiodic."""
    base = np.zeros(m)
    base[0] = amplitude
    amps = np.zeros(m)
    amps[: min(m, 3)] = amplitude
    freqs = np.array([1.0, math.sqrt(2.0), math.pi][: min(m, 3)] + [1.0] * max(0, m - 3))
    return [
        ForcingSpec.zero(m),
        ForcingSpec.stationary(base),
        ForcingSpec.exponential_envelope(1.0, base, name="exp(t)"),
        ForcingSpec.exponential_envelope(-1.0, base, name="exp(-t)"),
        ForcingSpec.quasiperiodic(amps, freqs, name="quasiperiodic"),
    ]


def mean_intensity(spec, basis, t, T0=4.0, norm="V'", rtol=0.05, max_doublings=12) -> dict:
    """``(1/T) int_{t-T}^t ||f||^2`` with ``T`` doubled until the change is below ``rtol``."""
    T = T0
    prev = integrate(spec, basis, t - T, t, norm) / T
    for _ in range(max_doublings):
        T *= 2
        cur = integrate(spec, basis, t - T, t, norm) / T
        if abs(cur - prev) <= rtol * max(abs(cur), 1e-300) or cur == prev:
            return {"value": cur, "T": T, "converged": True}
        prev = cur
    return {"value": prev, "T": T, "converged": False}


def sup_norm_in_time(spec, basis, t, norm="H", span=64.0, samples=4097) -> float:
    """``sup_{s <= t} ||f(s)||`` from the tail bound when available, else sampled on ``[t - span, t]``."""
    bound = sup_sq_bound(spec, basis, norm)
    if math.isfinite(bound):
        return math.sqrt(bound)
    if spec.variant == "exponential_envelope" and spec.rate > 0:
        return math.sqrt(float(sq_norm(spec, basis, [t], norm)[0]))
    s = np.linspace(t - span, t, samples)
    return math.sqrt(float(np.max(sq_norm(spec, basis, s, norm))))
