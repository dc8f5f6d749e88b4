"""Command-line entry point: ``pullback-ns run CONFIG`` and ``pullback-ns cache ...``.

Exit codes: 0 when the experiment ran and its verdict is positive, 2 when it
ran but the verdict is negative, 1 on any error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .background_flow import BoundaryData, build_background_flow, verify_layer_constraint
from .constants import NAMES, Constants
from .errors import ConfigError, DivergenceError, EigensolverError, GridMismatchError
from .forcing import ForcingSpec, class_equivalence_audit, forcing_library
from .operators import build_tensors
from .spectral_basis import (CacheError, DomainGrid, build_stokes_basis, cache_path, default_cache_dir,
                             fractional_norm, read_basis_cache, read_cache_header)

log = logging.getLogger("pullback_ns")

# -- config schema ----------------------------------------------------------

TOP_REQUIRED = {"grid", "m", "nu", "boundary", "epsilon", "forcing", "solver", "experiment"}
TOP_OPTIONAL = {"output_dir", "seed", "constants"}
CLOUD = {"t", "depth", "cloud_radius", "cloud_size"}
EXPERIMENTS = {
    "simulate": ({"t0", "t1", "initial"}, {"record_every"}),
    "pullback-fiber": (CLOUD | {"tol"}, set()),
    "absorption": (CLOUD | {"mu"}, set()),
    "mwz": (CLOUD | {"tol", "rel_eps"}, set()),
    "dimension": ({"t0", "transient", "T", "n_max"}, {"period", "C_hat"}),
    "semicontinuity": (CLOUD | {"deltas", "tol", "sigma"}, set()),
    "forcing-audit": ({"mu", "tau", "amplitude"}, {"norm"}),
    "regularity": (CLOUD | {"sigma", "mu_tilde", "mu"}, set()),
}
FORCING_KEYS = {
    "zero": set(),
    "stationary": {"sigma0"},
    "quasiperiodic": {"amplitudes", "frequencies", "phases"},
    "perturbed": {"sigma0", "delta", "amplitudes", "frequencies", "phases"},
    "exponential_envelope": {"rate", "base"},
    "sampled": {"times", "values", "extrapolation"},
}


def _collect_lines(node, path, lines):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for k, v in node.value:
            if k.value in seen:
                raise ConfigError(f"line {k.start_mark.line + 1}: duplicate key {k.value!r}")
            seen.add(k.value)
            lines[path + (k.value,)] = k.start_mark.line + 1
            _collect_lines(v, path + (k.value,), lines)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _collect_lines(v, path + (i,), lines)


def load_yaml(text: str):
    """Parse YAML keeping the source line of every key path."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark else ""
        raise ConfigError(f"{where}invalid YAML ({getattr(exc, 'problem', exc)})") from None
    if node is None:
        raise ConfigError("line 1: empty config")
    lines = {}
    _collect_lines(node, (), lines)
    return data, lines


@dataclass
class RunConfig:
    raw: dict
    lines: dict

    def line(self, *path):
        for k in range(len(path), -1, -1):
            if path[:k] in self.lines:
                return self.lines[path[:k]]
        return 1

    def fail(self, path, msg):
        raise ConfigError(f"line {self.line(*path)}: {'.'.join(map(str, path)) or '<root>'}: {msg}")

    @classmethod
    def from_file(cls, path):
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        raw, lines = load_yaml(p.read_text())
        cfg = cls(raw, lines)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text):
        raw, lines = load_yaml(text)
        cfg = cls(raw, lines)
        cfg.validate()
        return cfg

    # validation ---------------------------------------------------------
    def _keys(self, block, path, required, optional=frozenset()):
        if not isinstance(block, dict):
            self.fail(path, "expected a mapping")
        unknown = set(block) - set(required) - set(optional)
        if unknown:
            k = sorted(unknown)[0]
            self.fail(path + (k,), f"unknown key {k!r}")
        missing = set(required) - set(block)
        if missing:
            self.fail(path, f"missing required key(s) {sorted(missing)}")

    def _num(self, path, positive=False, integer=False):
        v = self.get(*path)
        ok = isinstance(v, (int, float)) and not isinstance(v, bool) and (not integer or isinstance(v, int))
        if not ok:
            self.fail(path, f"expected {'an integer' if integer else 'a number'}, got {v!r}")
        if positive and not v > 0:
            self.fail(path, f"must be positive, got {v}")
        return v

    def get(self, *path):
        v = self.raw
        for k in path:
            v = v[k]
        return v

    def validate(self):
        r = self.raw
        self._keys(r, (), TOP_REQUIRED, TOP_OPTIONAL)
        self._keys(r["grid"], ("grid",), {"n"})
        n = self._num(("grid", "n"), positive=True, integer=True)
        if n < 8:
            self.fail(("grid", "n"), "need at least 8 interior nodes")
        m = self._num(("m",), positive=True, integer=True)
        if m > n * n:
            self.fail(("m",), f"m={m} exceeds {n * n} available modes")
        self._num(("nu",), positive=True)
        self._keys(r["boundary"], ("boundary",), {"profile", "amplitude"})
        if r["boundary"]["profile"] not in ("zero", "constant", "smooth", "lid"):
            self.fail(("boundary", "profile"), f"unknown profile {r['boundary']['profile']!r}")
        self._num(("boundary", "amplitude"))
        self._num(("epsilon",), positive=True)
        self._keys(r["solver"], ("solver",), {"dt"}, {"scheme", "clip_threshold"})
        self._num(("solver", "dt"), positive=True)
        f = r["forcing"]
        if not isinstance(f, dict) or "variant" not in f:
            self.fail(("forcing",), "needs a 'variant' key")
        if f["variant"] not in FORCING_KEYS:
            self.fail(("forcing", "variant"), f"unknown variant {f['variant']!r}")
        self._keys(f, ("forcing",), FORCING_KEYS[f["variant"]] | {"variant"})
        e = r["experiment"]
        if not isinstance(e, dict) or "kind" not in e:
            self.fail(("experiment",), "needs a 'kind' key")
        if e["kind"] not in EXPERIMENTS:
            self.fail(("experiment", "kind"), f"unknown experiment {e['kind']!r}; choose from {sorted(EXPERIMENTS)}")
        req, opt = EXPERIMENTS[e["kind"]]
        self._keys(e, ("experiment",), req | {"kind"}, opt)
        if "sigma" in e and e["kind"] == "semicontinuity":
            if f["variant"] != "stationary":
                self.fail(("forcing", "variant"), "semicontinuity needs a stationary sigma0 forcing")
            self._keys(e["sigma"], ("experiment", "sigma"), {"amplitudes", "frequencies", "phases"})
        if "constants" in r:
            self._keys(r["constants"], ("constants",), set(), set(NAMES))
        try:
            self.forcing()
        except ConfigError:
            raise
        except ValueError as exc:
            self.fail(("forcing",), str(exc))

    # builders -----------------------------------------------------------
    @property
    def m(self):
        return self.raw["m"]

    def vec(self, values, path):
        v = np.asarray(values, dtype=float)
        if v.ndim != 1 or len(v) > self.m:
            self.fail(path, f"expected a list of at most m={self.m} numbers")
        return np.pad(v, (0, self.m - len(v)))

    def forcing(self) -> ForcingSpec:
        f = self.raw["forcing"]
        p = ("forcing",)
        v = f["variant"]
        if v == "zero":
            return ForcingSpec.zero(self.m)
        if v == "stationary":
            return ForcingSpec.stationary(self.vec(f["sigma0"], p + ("sigma0",)))
        if v in ("quasiperiodic", "perturbed"):
            qp = ForcingSpec.quasiperiodic(self.vec(f["amplitudes"], p + ("amplitudes",)),
                                           self.vec(f["frequencies"], p + ("frequencies",)),
                                           self.vec(f["phases"], p + ("phases",)))
            if v == "quasiperiodic":
                return qp
            return ForcingSpec.perturbed(self.vec(f["sigma0"], p + ("sigma0",)), float(f["delta"]), qp)
        if v == "exponential_envelope":
            return ForcingSpec.exponential_envelope(float(f["rate"]), self.vec(f["base"], p + ("base",)))
        vals = np.array([self.vec(row, p + ("values",)) for row in f["values"]])
        return ForcingSpec.sampled(f["times"], vals, f["extrapolation"])

    def sigma(self) -> ForcingSpec:
        s = self.raw["experiment"]["sigma"]
        p = ("experiment", "sigma")
        return ForcingSpec.quasiperiodic(self.vec(s["amplitudes"], p), self.vec(s["frequencies"], p),
                                         self.vec(s["phases"], p))

    def constants(self) -> Constants:
        vals = self.raw.get("constants", {})
        return Constants({k: float(v) for k, v in vals.items()}, {k: "config" for k in vals})

    def solver(self):
        from .solver import SolverConfig

        s = self.raw["solver"]
        return SolverConfig(nu=float(self.raw["nu"]), dt=float(s["dt"]), scheme=s.get("scheme", "if-heun"),
                            clip_threshold=s.get("clip_threshold", 1e6))


# -- system assembly --------------------------------------------------------

def build_system(cfg: RunConfig, cache_dir=None, workers=1):
    grid = DomainGrid(cfg.raw["grid"]["n"])
    basis = build_stokes_basis(grid, cfg.m, cache_dir=cache_dir)
    b = cfg.raw["boundary"]
    boundary = BoundaryData.named(b["profile"], float(b["amplitude"]))
    flow = build_background_flow(grid, boundary, float(cfg.raw["epsilon"]))
    tensors = build_tensors(basis, flow, float(cfg.raw["nu"]), workers=workers, cache_dir=cache_dir or default_cache_dir())
    return basis, boundary, flow, tensors


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_rows(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    return "" if x is None else x


def _cloud_fn(e, m, seed):
    from .pullback_diag import sphere_cloud

    pts = sphere_cloud(m, float(e["cloud_radius"]), int(e["cloud_size"]), seed=seed)
    return lambda tau: pts


def _mu(value, nu, lam1):
    if value == "mu0":
        return 0.5 * nu * lam1
    return float(value)


def run_experiment(cfg: RunConfig, out: Path, cache_dir=None, workers=1):
    """Execute the configured experiment; returns ``(verdict_ok, summary_rows, outputs)``."""
    from . import dimension as dim
    from . import pullback_diag as pd
    from .solver import ModalState, evolve, write_trajectory_csv

    basis, boundary, flow, tensors = build_system(cfg, cache_dir, workers)
    e = cfg.raw["experiment"]
    kind = e["kind"]
    scfg = cfg.solver()
    forcing = cfg.forcing()
    nu = scfg.nu
    lam1 = float(basis.eigenvalues[0])
    seed = int(cfg.raw.get("seed", 0))
    m = cfg.m
    summary, outputs = [], []
    ok = True

    def ladder():
        return pd.default_ladder(float(e["t"]), nu, lam1, int(e["depth"]))

    if kind == "simulate":
        a0 = np.zeros(m) if e["initial"] == "zero" else cfg.vec(e["initial"], ("experiment", "initial"))
        final, traj = evolve(ModalState(float(e["t0"]), a0), float(e["t1"]), scfg, tensors, forcing,
                             record_every=int(e.get("record_every", 1)))
        outputs.append(write_trajectory_csv(out / "trajectory.csv", traj, basis.eigenvalues))
        norms = [float(np.linalg.norm(s.a)) for s in traj]
        summary += [("final_t", final.t), ("final_h_norm", norms[-1]), ("states", len(traj))]
    elif kind in ("pullback-fiber", "mwz"):
        fib = pd.pullback_fiber(float(e["t"]), ladder(), _cloud_fn(e, m, seed), scfg, tensors, forcing,
                                tol=float(e["tol"]))
        outputs.append(pd.write_cloud_csv(out / "fiber.csv", fib.t, fib.points))
        taus = pd.snap_ladder(float(e["t"]), ladder(), scfg.dt)[0]
        outputs.append(_write_rows(out / "ladder.csv", ["tau", "distance_to_next"],
                                   [(taus[j], fib.distances[j]) for j in range(len(fib.distances))]))
        summary += [("converged", int(fib.converged)), ("last_distance", fib.last_distance),
                    ("fiber_points", len(fib.points))]
        ok = fib.converged
        if kind == "mwz":
            prof = pd.mwz_tail_profile(fib.points, rel_eps=float(e["rel_eps"]))
            outputs.append(_write_rows(out / "tail.csv", ["m", "tail"], prof["table"]))
            summary += [("m0", prof["m0"] if prof["m0"] is not None else -1)]
            ok = ok and prof["m0"] is not None and prof["m0"] < m
    elif kind in ("absorption", "regularity"):
        mu = _mu(e["mu"], nu, lam1)
        params = pd.absorbing_params(tensors, nu, mu, float(cfg.raw["epsilon"]), boundary.sup_norm, forcing,
                                     t=float(e["t"]), constants=cfg.constants())
        r2 = float(e["cloud_radius"]) ** 2
        ens = pd.run_ensemble(float(e["t"]), ladder(), _cloud_fn(e, m, seed), scfg, tensors, forcing,
                              radius_sq=lambda tau: r2, mu=mu)
        if kind == "absorption":
            rep = pd.verify_absorption(ens, params)
            rows = [(tau, nsq, rep["rho0_sq"], int(nsq <= rep["rho0_sq"])) for tau, nsq in zip(rep["taus"], rep["norms_sq"])]
            outputs.append(_write_rows(out / "absorption.csv", ["tau", "max_norm_sq", "rho0_sq", "inside"], rows))
        else:
            sigma = float(e["sigma"])
            mu_t = nu * lam1 if e["mu_tilde"] == "max" else float(e["mu_tilde"])
            rho = pd.regular_absorbing_radius(params, sigma, mu_t)
            norms = [float(np.max(fractional_norm(basis, ens.terminal[j], sigma) ** 2)) for j in range(len(ens.taus))]
            inside = [x <= rho for x in norms]
            j0 = None
            for j in range(len(inside) - 1, -1, -1):
                if not inside[j]:
                    break
                j0 = j
            rep = {"rho0_sq": rho, "tau0": None if j0 is None else ens.taus[j0]}
            outputs.append(_write_rows(out / "regularity.csv", ["tau", "max_frac_norm_sq", "rho0p_sq", "inside"],
                                       [(t, x, rho, int(i)) for t, x, i in zip(ens.taus, norms, inside)]))
        summary += [("rho0_sq", rep["rho0_sq"]), ("tau0", rep["tau0"] if rep["tau0"] is not None else float("nan"))]
        ok = rep["tau0"] is not None
    elif kind == "dimension":
        a0 = np.zeros(m)
        tr = dim.trace_exponents(ModalState(float(e["t0"]), a0), float(e["T"]), int(e["n_max"]), scfg, tensors,
                                 forcing, period=int(e.get("period", 10)), transient=float(e["transient"]))
        stats = dim.forcing_statistics(forcing, basis.eigenvalues, float(e["t0"]) + float(e["transient"]) + float(e["T"]))
        rep = dim.dimension_bounds(nu, lam1, float(cfg.raw["epsilon"]), boundary.sup_norm, stats["M"],
                                   stats["f_sup_H"], C_hat=tuple(e.get("C_hat", (1.0, 1.0, 1.0))),
                                   C_hat_source="config" if "C_hat" in e else "default (uncalibrated)",
                                   M_converged=stats["M_converged"], trace=tr)
        outputs.append(_write_rows(out / "q_table.csv", ["n", "q_n", "q_n_volume"],
                                   [(r["n"], r["q_n"], r["q_n_volume"]) for r in tr.table()]))
        summary += [("first_negative_q", tr.first_negative if tr.first_negative else -1),
                    ("half_window_change", tr.half_change), ("Re_stmt", rep.Re_stmt), ("Re_proof", rep.Re_proof),
                    ("G_stmt", rep.G_stmt), ("G_proof", rep.G_proof), ("M", rep.M), ("case_I_n", rep.case_I_n),
                    ("case_II_bound", rep.case_II_bound), ("case_II_bound_proof", rep.case_II_bound_proof)]
        ok = tr.stabilized
    elif kind == "semicontinuity":
        if forcing.variant != "stationary":
            cfg.fail(("forcing", "variant"), "semicontinuity needs a stationary sigma0 forcing")
        res = pd.upper_semicontinuity_curve([float(d) for d in e["deltas"]], float(e["t"]), np.array(forcing.sigma0),
                                            cfg.sigma(), scfg, tensors, ladder(), _cloud_fn(e, m, seed),
                                            tol=float(e["tol"]))
        outputs.append(_write_rows(out / "semicontinuity.csv", ["delta", "distance", "converged", "C0"],
                                   [(r["delta"], r["distance"], int(r["converged"]), r["C0"]) for r in res["rows"]]))
        exp_ = res["exponent"] if res["exponent"] is not None else float("nan")
        summary += [("exponent", exp_), ("monotone", int(res["monotone"]))]
        ok = res["monotone"] and res["exponent"] is not None and 0.8 <= res["exponent"] <= 1.2
    elif kind == "forcing-audit":
        lib = forcing_library(m, float(e["amplitude"]))
        rows = class_equivalence_audit(lib, basis.eigenvalues, mu=float(e["mu"]), tau=float(e["tau"]),
                                       norm=e.get("norm", "V'"))
        keys = ["spec", "translation_bounded", "tempered", "uniformly_tempered", "pb_value", "tempered_value",
                "ut_value", "agree", "implication_ok", "window_ok", "defect"]
        outputs.append(_write_rows(out / "audit.csv", keys, [[r[k] for k in keys] for r in rows]))
        defects = sum(r["defect"] for r in rows)
        summary += [("specs", len(rows)), ("defects", defects)]
        ok = defects == 0
    layer = verify_layer_constraint(flow, nu, cfg.constants())
    if not layer["ok"]:
        log.warning("layer constraint C2 C3 C4 eps |phi| <= nu/4 fails (%.3g > %.3g); see constants provenance "
                    "in manifest.json", layer["lhs"], layer["rhs"])
    summary += [("layer_constraint_lhs", layer["lhs"]), ("layer_constraint_rhs", layer["rhs"]),
                ("layer_constraint_ok", int(layer["ok"]))]
    outputs.append(_write_rows(out / "summary.csv", ["quantity", "value"], summary))
    return ok, summary, outputs, {"basis_id": basis.basis_id, "flow_id": flow.flow_id,
                                  "tensor_hash": tensors.content_hash(), "constants": cfg.constants().report()}


def cmd_run(args) -> int:
    cfg = RunConfig.from_file(args.config)
    out = Path(args.output_dir or cfg.raw.get("output_dir") or "runs/out")
    out.mkdir(parents=True, exist_ok=True)
    ok, summary, outputs, ids = run_experiment(cfg, out, cache_dir=args.cache_dir, workers=args.workers)
    verdict = "pass" if ok else "fail"
    manifest = {"tool_version": __version__, "config": cfg.raw, "experiment": cfg.raw["experiment"]["kind"],
                "verdict": verdict, **ids,
                "outputs": {p.name: _sha(p) for p in outputs}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    lines = [f"experiment: {manifest['experiment']}", f"verdict: {verdict}"]
    lines += [f"{k}: {_fmt(v)}" for k, v in summary]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if ok else 2


def cmd_cache(args) -> int:
    cdir = Path(args.cache_dir) if args.cache_dir else default_cache_dir()
    if args.action == "clear":
        removed = 0
        if cdir.exists():
            for p in list(cdir.glob("stokes_n*_m*.bin")) + list(cdir.glob("tensors_*.npz")):
                p.unlink()
                removed += 1
        print(f"removed {removed} cache file(s) from {cdir}")
        return 0
    if args.n is None or args.m is None:
        raise ConfigError("cache build/inspect need --n and --m")
    path = cache_path(cdir, args.n, args.m)
    if args.action == "build":
        existed = path.exists()
        basis = build_stokes_basis(DomainGrid(args.n), args.m, cache_dir=cdir)
        hdr = read_cache_header(path)
        print(f"{'reused' if existed else 'built'} {path} sha256={hdr['sha256']} basis_id={basis.basis_id}")
        return 0
    if not path.exists():
        print(f"no cache for n={args.n} m={args.m} in {cdir}")
        return 0
    try:
        hdr = read_cache_header(path)
        basis = read_basis_cache(path, DomainGrid(args.n), args.m)
    except CacheError as exc:
        print(f"cache {path} is invalid ({exc}); refusing reuse", file=sys.stderr)
        return 1
    for k in ("format", "n_interior", "m", "h", "tool_version", "method", "sha256"):
        print(f"{k}: {hdr[k]}")
    print("eigenvalues: " + " ".join(f"{x:.10g}" for x in basis.eigenvalues))
    return 0


def make_parser():
    p = argparse.ArgumentParser(prog="pullback-ns", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", "-v", action="count", default=0)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment described by a YAML config")
    r.add_argument("config")
    r.add_argument("--output-dir", default=None)
    c = sub.add_parser("cache", help="manage the basis cache")
    c.add_argument("action", choices=("build", "inspect", "clear"))
    c.add_argument("--n", type=int)
    c.add_argument("--m", type=int)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_cache(args)
    except (ConfigError, DivergenceError, GridMismatchError, EigensolverError, CacheError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
