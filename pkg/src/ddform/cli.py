"""Configuration-driven experiment runner.

One JSON config file describes one experiment suite: a coefficient family,
grid and solver settings, the list of experiments to run, and optional
expectations.  Each experiment writes full-precision CSV tables and
contributes named pass/fail checks to a single summary.json; the process
exit status encodes the overall outcome.

Exit codes: 0 all checks pass, 1 check failure, 2 config error,
3 admissibility failure, 4 solver divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis
from .coeff import (CoefficientField, angular_field, csv_field, envelope_check,
                    g_field, identity_field, k_field)
from .errors import (AdmissibilityError, ConfigError, DdformError,
                     DivergenceError)
from .grids import p_mean_profile
from .modulus import check_conditions, default_check_grid
from .solver import (SolverConfig, build_context, construct_solution,
                     radial_oracle, reconstruct, solve_fluctuation,
                     solve_seeded)

EXPERIMENTS = ("check-omega", "build-z", "compare-asymptotic",
               "corollary-scan", "weak-residual", "decompose", "envelope")

DEFAULT_THRESHOLDS = {
    "oracle_m2_rel": 1e-3,
    "leading_match_rel": 0.05,
    "weak_residual_rel": 1e-4,
    "decompose_c_rel": 0.01,
    "eps1": 0.1,
    "slope_tol": 0.1,
    "far_exponent_slack": 0.3,
    "contraction_final": 0.5,
    "zeta_window": [1e-3, 1.0],
}


def _as_complex(v) -> complex:
    if isinstance(v, (list, tuple)):
        return complex(v[0], v[1])
    return complex(v)


class Experiment:
    """Parsed configuration with resolved defaults."""

    def __init__(self, raw: dict):
        try:
            self.raw = raw
            fam = dict(raw.get("family", {"name": "identity"}))
            self.family_name = fam.pop("name")
            self.family_params = fam
            self.n = int(raw.get("n", 3))
            self.p = float(raw.get("p", 2.0))
            grid = raw.get("grid", {})
            solver = raw.get("solver", {})
            self.solver_cfg = SolverConfig(
                p=self.p,
                y0=_as_complex(solver.get("y0", 1.0)),
                tol_fixedpoint=float(solver.get("tol_fixedpoint", 1e-8)),
                max_iter=int(solver.get("max_iter", 50)),
                r_min=float(grid.get("r_min", 1e-4)),
                r_max=float(grid.get("r_max", 20.0)),
                per_octave=int(grid.get("per_octave", 18)),
                l_max=int(grid.get("l_max", 8)),
                delta_threshold=float(solver.get("delta_threshold", 0.15)),
                alpha_margin=float(solver.get("alpha_margin", 0.2)),
            )
            self.experiments = list(raw.get("experiments", []))
            for e in self.experiments:
                if e not in EXPERIMENTS:
                    raise ConfigError(f"unknown experiment {e!r}")
            self.seed = int(raw.get("seed", 1234))
            self.out_dir = raw.get("out_dir", "ddform-out")
            self.thresholds = dict(DEFAULT_THRESHOLDS)
            self.thresholds.update(raw.get("thresholds", {}))
            self.expect = dict(raw.get("expect", {}))
            self.decompose_lambda = float(raw.get("decompose_lambda", 0.1))
            self.refine = 0
            if self.n != 3:
                raise ConfigError("experiments currently run in dimension 3")
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def build_field(self) -> CoefficientField:
        name, p = self.family_name, self.family_params
        try:
            if name == "identity":
                return identity_field(self.n)
            if name == "g":
                return g_field(n=self.n, **p)
            if name == "k":
                return k_field(n=self.n, **p)
            if name == "angular":
                if "amplitude" in p and isinstance(p["amplitude"], (list, tuple)):
                    p = dict(p, amplitude=_as_complex(p["amplitude"]))
                return angular_field(n=self.n, **p)
            if name == "csv":
                return csv_field(p["path"], n=self.n)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad parameters for family {name!r}: {exc}") from exc
        raise ConfigError(f"unknown coefficient family {name!r}")

    def echo(self) -> dict:
        cfg = dataclasses.asdict(self.solver_cfg)
        cfg["y0"] = [self.solver_cfg.y0.real, self.solver_cfg.y0.imag]
        return {
            "family": {"name": self.family_name, **{
                k: ([v.real, v.imag] if isinstance(v, complex) else v)
                for k, v in self.family_params.items()}},
            "n": self.n, "p": self.p, "solver": cfg,
            "experiments": self.experiments, "seed": self.seed,
            "thresholds": self.thresholds, "expect": self.expect,
            "decompose_lambda": self.decompose_lambda,
            "refine": self.refine,
        }


def write_csv(path: Path, header: list[str], columns: list[np.ndarray]):
    cols = [np.asarray(c) for c in columns]
    fmts = ["%d" if np.issubdtype(c.dtype, np.integer) else "%.17e" for c in cols]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(f % v for f, v in zip(fmts, row)) + "\n")


def _field_csv_columns(fld_values, rgrid):
    n_r, n_s = fld_values.shape
    r = np.repeat(rgrid.nodes, n_s)
    idx = np.tile(np.arange(n_s), n_r)
    return (["r", "theta_index", "re", "im"],
            [r, idx, fld_values.real.ravel(), fld_values.imag.ravel()])


class Runner:
    def __init__(self, exp: Experiment, out_dir: Path):
        self.exp = exp
        self.out = out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.checks: list[dict] = []
        self.tables: dict[str, str] = {}
        self.fld = exp.build_field()
        self._ctx = None
        self._bundle = None

    def check(self, name: str, value: float, tolerance: float, ok: bool):
        self.checks.append({"name": name, "pass": bool(ok),
                            "value": float(value) if math.isfinite(value) else
                            (1e308 if value > 0 else -1e308),
                            "tolerance": float(tolerance)})

    @property
    def ctx(self):
        if self._ctx is None:
            self._ctx = build_context(self.fld, self.exp.solver_cfg)
        return self._ctx

    @property
    def bundle(self):
        if self._bundle is None:
            V, diag = solve_fluctuation(self.ctx, self.exp.solver_cfg)
            self._bundle = reconstruct(self.ctx, self.exp.solver_cfg, V, diag)
        return self._bundle

    # -- individual experiments ------------------------------------------------

    def run_check_omega(self):
        mod = self.fld.envelope
        report = check_conditions(mod, default_check_grid(), n=self.exp.n,
                                  delta_star=self.exp.solver_cfg.delta_threshold)
        rr = np.geomspace(self.exp.solver_cfg.r_min, 1.0, 200)
        path = self.out / "omega_check.csv"
        write_csv(path, ["r", "omega"], [rr, np.asarray(mod(rr), dtype=float)])
        self.tables["omega_check"] = path.name
        total = report.dini_delta + report.dini_tail
        self.check("omega_dini", total, report.delta_star,
                   math.isfinite(total) and total <= report.delta_star)
        self.check("omega_nonincreasing", float(report.om2_holds), 1.0, report.om2_holds)
        self.check("omega_nondecreasing", float(report.om3_holds), 1.0, report.om3_holds)
        self.check("omega_sqrt_bound", report.sup_omega,
                   report.c_chk * math.sqrt(total) if math.isfinite(total) else math.inf,
                   report.sqrt_delta_bound_ok)
        if not report.admissible:
            raise AdmissibilityError(
                "square-Dini integral diverges" if not math.isfinite(total)
                else f"modulus inadmissible: delta = {total:.4g}, "
                     f"monotone flags ({report.om2_holds}, {report.om3_holds})")
        env = envelope_check(self.fld, seed=self.exp.seed)
        margins = np.array([row["margin"] for row in env["rows"]])
        radii = np.array([row["r"] for row in env["rows"]])
        sups = np.array([row["sup"] for row in env["rows"]])
        path = self.out / "envelope_margins.csv"
        write_csv(path, ["r", "sup_dev", "omega", "margin"],
                  [radii, sups, sups + margins, margins])
        self.tables["envelope_margins"] = path.name
        self.check("envelope_margins", float(margins.min()), 0.0, env["pass"])

    def run_build_z(self):
        b = self.bundle
        g = b.solution.rgrid
        header, cols = _field_csv_columns(b.solution.values, g)
        path = self.out / "z_field.csv"
        write_csv(path, header, cols)
        self.tables["z_field"] = path.name
        prof_tab = b.tables()["profiles"]
        path = self.out / "profiles.csv"
        names, cols = ["r"], [prof_tab["r"]]
        for key, vals in prof_tab.items():
            if key == "r":
                continue
            names += [f"{key}_re", f"{key}_im"]
            cols += [np.asarray(vals).real, np.asarray(vals).imag]
        write_csv(path, names, cols)
        self.tables["profiles"] = path.name
        ratios = b.diagnostics.get("contraction_ratios", [])
        final_ratio = ratios[-1] if ratios else 0.0
        self.check("contraction_ratios_below_one",
                   max(ratios) if ratios else 0.0, 1.0,
                   all(x < 1.0 for x in ratios))
        self.check("contraction_final_ratio", final_ratio,
                   self.exp.thresholds["contraction_final"],
                   final_ratio <= self.exp.thresholds["contraction_final"])
        self.check("converged", float(b.diagnostics["iterations"]),
                   float(self.exp.solver_cfg.max_iter),
                   b.diagnostics["converged"])
        self.check("fluctuation_zero_mean",
                   b.fluctuation.max_mean_defect(),
                   self.exp.solver_cfg.zero_mean_tol
                   * max(b.fluctuation.max_abs(), 1e-300),
                   b.fluctuation.max_mean_defect()
                   <= self.exp.solver_cfg.zero_mean_tol
                   * max(b.fluctuation.max_abs(), 1e-30) + 1e-250)
        # leading-term ratio bound
        lo, hi = self.exp.thresholds["zeta_window"]
        zr = self._zeta_ratio(lo, hi)
        self.check("zeta_bound_ratio", zr, math.inf, math.isfinite(zr))
        far = analysis.z_infinity(b.solution)
        target = -self.exp.n + self.exp.thresholds["far_exponent_slack"]
        self.check("far_field_exponent", far["exponent"], target,
                   far["exponent"] <= target)

    def _zeta_ratio(self, lo: float, hi: float) -> float:
        b = self.bundle
        g = b.solution.rgrid
        mp = p_mean_profile(b.zeta, self.exp.p)
        mod = self.fld.envelope
        om = np.asarray(mod(np.minimum(g.nodes, 1.0)), dtype=float)
        cum = g.cumulative(om ** 2, a=0.0).real
        tail = mod.dini_tail(g.r_min) if mod.dini_tail else 0.0
        denom = np.maximum(om, cum + (tail if math.isfinite(tail) else 0.0))
        sel = (g.nodes >= lo) & (g.nodes < hi) & np.isfinite(mp) & (denom > 0)
        return float(np.max(mp[sel] / denom[sel])) if sel.any() else 0.0

    def run_compare_asymptotic(self):
        b = self.bundle
        g = b.solution.rgrid
        if self.fld.is_equivariant:
            sel = (g.nodes >= 1e-3) & (g.nodes <= 1.0)
            radii = g.nodes[sel]
            oracle = radial_oracle(self.fld, radii, self.exp.solver_cfg.y0)
            approx = b.solution.sphere_means().values[sel]
            rel = np.abs(approx - oracle) / np.abs(oracle)
            path = self.out / "asymptotic.csv"
            write_csv(path, ["r", "oracle_re", "oracle_im", "solver_re",
                             "solver_im", "rel_dev"],
                      [radii, oracle.real, oracle.imag, approx.real,
                       approx.imag, rel])
            self.tables["asymptotic"] = path.name
            tol = self.exp.thresholds["oracle_m2_rel"]
            self.check("oracle_rel_deviation", float(rel.max()), tol,
                       float(rel.max()) <= tol)
        match = self._leading_match()
        self.check("leading_term_log_match", match["max_dev"],
                   match["allowed"], match["max_dev"] <= match["allowed"])

    def _leading_match(self, lo: float = 1e-3, hi: float = 1e-1) -> dict:
        b = self.bundle
        g = b.solution.rgrid
        mp = p_mean_profile(b.solution, self.exp.p)
        sel = (g.nodes >= lo) & (g.nodes <= hi) & np.isfinite(mp) & (mp > 0)
        logm = np.log(mp[sel])
        logl = np.log(np.abs(b.leading.values[sel]))
        resid = logm - logl
        offset = float(resid.mean())
        max_dev = float(np.abs(resid - offset).max())
        allowed = self.exp.thresholds["leading_match_rel"] \
            * max(1.0, float(np.abs(logl).max()))
        return {"max_dev": max_dev, "allowed": allowed, "offset": offset}

    def run_corollary_scan(self):
        report = analysis.classify_criterion(self.ctx.prof, self.ctx.rgrid)
        path = self.out / "criterion.csv"
        write_csv(path, ["r", "criterion"], [report.radii, report.criterion])
        self.tables["criterion"] = path.name
        mp = p_mean_profile(self.bundle.solution, self.exp.p)
        g = self.ctx.rgrid
        decade = (g.nodes >= g.r_min) & (g.nodes <= 10 * g.r_min)
        trend = np.diff(mp[decade])
        coherent = True
        if report.classification == "vanishing":
            coherent = bool(np.all(trend > 0))
        elif report.classification == "unbounded":
            coherent = bool(np.all(trend < 0))
        self.check("classification_coherent", float(coherent), 1.0, coherent)
        if "classification" in self.exp.expect:
            want = self.exp.expect["classification"]
            self.check(f"classification_is_{want}",
                       float(report.classification == want), 1.0,
                       report.classification == want)
        self.tables["classification"] = report.classification

    def run_weak_residual(self):
        b = self.bundle
        ev = analysis.FieldEvaluator(b.solution)
        bumps = analysis.bump_battery(seed=self.exp.seed)
        quality = 2 ** self.exp.refine
        rows = []
        zmax = b.solution.max_abs()
        for i, bump in enumerate(bumps):
            res = analysis.weak_residual(
                ev, self.fld, bump, sphere_rule=self.ctx.sphere,
                n_rad=64 * quality, n_polar=32 * quality, n_az=64 * quality)
            norm = abs(res) / (bump.hessian_sup() * zmax)
            rows.append((i, abs(res), norm))
        arr = np.array(rows)
        path = self.out / "residuals.csv"
        write_csv(path, ["bump_index", "residual_abs", "residual_normalized"],
                  [arr[:, 0].astype(int), arr[:, 1], arr[:, 2]])
        self.tables["residuals"] = path.name
        tol = self.exp.thresholds["weak_residual_rel"]
        worst = float(arr[:, 2].max())
        self.check("weak_residual_max", worst, tol, worst <= tol)

    def run_decompose(self):
        lam = self.exp.decompose_lambda
        u_aux, _ = solve_seeded(self.fld, self.exp.solver_cfg, self.ctx)
        b = self.bundle
        u = b.solution.copy_with(
            b.solution.values + lam * u_aux.values,
            (b.solution.right_at_break if b.solution.right_at_break is not None
             else b.solution.values[b.solution.rgrid.break_index])
            + lam * (u_aux.right_at_break if u_aux.right_at_break is not None
                     else u_aux.values[b.solution.rgrid.break_index]))
        result = analysis.decompose(u, b.solution,
                                    eps1=self.exp.thresholds["eps1"],
                                    p=self.exp.p,
                                    slope_tol=self.exp.thresholds["slope_tol"])
        g = b.solution.rgrid
        mp_w = p_mean_profile(result["w"], self.exp.p)
        ok = np.isfinite(mp_w)
        path = self.out / "decompose.csv"
        write_csv(path, ["r", "mp_w"], [g.nodes[ok], mp_w[ok]])
        self.tables["decompose"] = path.name
        crel = abs(result["C"] - 1.0)
        tol = self.exp.thresholds["decompose_c_rel"]
        self.check("decompose_c_recovery", crel, tol, crel <= tol)
        self.check("decompose_slope", result["slope"],
                   result["slope_threshold"], result["pass"])

    def run_envelope(self):
        b = self.bundle
        g = b.solution.rgrid
        mp = p_mean_profile(b.solution, self.exp.p)
        sel = (g.nodes < 1.0) & np.isfinite(mp)
        radii = g.nodes[sel]
        lower, upper = analysis.envelope_bounds(self.fld.envelope, radii, self.exp.n)
        c1, c2 = analysis.fit_envelope_constants(mp[sel], lower, upper)
        holds = bool(np.all(c1 * lower <= mp[sel] * (1 + 1e-12))
                     and np.all(mp[sel] <= c2 * upper * (1 + 1e-12)))
        path = self.out / "envelope.csv"
        write_csv(path, ["r", "mp", "lower", "upper"],
                  [radii, mp[sel], lower, upper])
        self.tables["envelope"] = path.name
        self.check("envelope_holds", float(holds), 1.0, holds)
        self.tables["envelope_constants"] = json.dumps({"c1": c1, "c2": c2})

    def run(self, experiments: list[str]) -> int:
        handlers = {
            "check-omega": self.run_check_omega,
            "build-z": self.run_build_z,
            "compare-asymptotic": self.run_compare_asymptotic,
            "corollary-scan": self.run_corollary_scan,
            "weak-residual": self.run_weak_residual,
            "decompose": self.run_decompose,
            "envelope": self.run_envelope,
        }
        status = 0
        try:
            for name in experiments:
                handlers[name]()
        except AdmissibilityError as exc:
            self.checks.append({"name": "admissible", "pass": False,
                                "value": 0.0, "tolerance": 1.0,
                                "detail": str(exc)})
            status = 3
        except DivergenceError as exc:
            self.checks.append({"name": "solver_contraction", "pass": False,
                                "value": 0.0, "tolerance": 1.0,
                                "detail": str(exc)})
            status = 4
        if status == 0 and any(not c["pass"] for c in self.checks):
            status = 1
        self.write_summary(status)
        return status

    def write_summary(self, status: int):
        rgrid, sphere = self.exp.solver_cfg.make_grids()
        summary = {
            "config_echo": self.exp.echo(),
            "checks": self.checks,
            "tables": self.tables,
            "status": status,
            "reproducibility": {
                "version": __version__,
                "seed": self.exp.seed,
                "grid_sha256": rgrid.sha256(),
                "sphere_sha256": sphere.sha256(),
                "tolerances": self.exp.thresholds,
            },
        }
        with open(self.out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def run(config: dict, out_dir: str | Path | None = None,
        experiments: list[str] | None = None, refine: int = 0) -> int:
    """Execute the configured experiments; returns the process exit status."""
    try:
        exp = Experiment(config)
        if refine:
            exp.solver_cfg = exp.solver_cfg.refined(refine)
            exp.refine = refine
        todo = experiments if experiments is not None else exp.experiments
        for name in todo:
            if name not in EXPERIMENTS:
                raise ConfigError(f"unknown experiment {name!r}")
        runner = Runner(exp, Path(out_dir or exp.out_dir))
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DdformError as exc:
        print(f"setup error: {exc}", file=sys.stderr)
        return 2
    return runner.run(todo)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ddform",
        description="Experiment runner for double-divergence-form asymptotics")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run",) + EXPERIMENTS:
        sp = sub.add_parser(name, help=f"run {'the configured suite' if name == 'run' else name}")
        sp.add_argument("--config", required=True, help="path to the JSON config")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads for reproducible runs")
        sp.add_argument("--refine", type=int, default=0,
                        help="double radial nodes and angular band this many times")
    args = parser.parse_args(argv)
    try:
        with open(args.config) as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    experiments = None if args.command == "run" else [args.command]
    if args.threads:
        try:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                return run(config, args.out, experiments, args.refine)
        except ImportError:
            print("threadpoolctl unavailable; thread cap ignored", file=sys.stderr)
    return run(config, args.out, experiments, args.refine)


if __name__ == "__main__":
    sys.exit(main())
