"""Construction of the distinguished global solution by Neumann iteration.

The angular fluctuation V solves  V + S V + T V = -y0 * (profile step of 1)
in the weighted sup norm; the solution is then reassembled from V, the
cumulative coupling integral, and the integrating factor.  Equivariant
coefficient families admit a one-dimensional oracle (adaptive quadrature of
the drift) used to validate the full machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import quad

from . import analysis
from .coeff import CoefficientField
from .errors import AdmissibilityError, DivergenceError, DomainError
from .grids import AnnularField, RadialGrid, RadialProfile, SphereRule, p_mean_profile, x_norm
from .modulus import check_conditions, default_check_grid
from .ops import (OperatorContext, coupled_step, cumulative_coupling,
                  fluct_step, profile_step, profiles)
from .potential import MatrixField, ddiv_potential
from .sphharm import SPHERE_AREA_3D


@dataclass(frozen=True)
class SolverConfig:
    """Grids, tolerances and normalization for the construction."""

    p: float = 2.0
    y0: complex = 1.0 + 0.0j
    tol_fixedpoint: float = 1e-8
    max_iter: int = 50
    r_min: float = 1e-4
    r_max: float = 20.0
    per_octave: int = 18
    l_max: int = 8
    delta_threshold: float = 0.15
    alpha_margin: float = 0.2
    zero_mean_tol: float = 1e-8
    check_admissibility: bool = True

    def __post_init__(self):
        if self.tol_fixedpoint <= 0 or self.max_iter < 1:
            raise DomainError("tolerance must be positive and max_iter >= 1")
        if self.y0 == 0:
            raise DomainError("normalization must be nonzero")
        if not 1 <= self.p < math.inf:
            raise DomainError("p must lie in [1, inf)")

    def refined(self, times: int = 1) -> "SolverConfig":
        f = 2 ** times
        return replace(self, per_octave=self.per_octave * f,
                       l_max=self.l_max * f)

    def make_grids(self) -> tuple[RadialGrid, SphereRule]:
        return (RadialGrid.geometric(self.r_min, self.r_max, self.per_octave),
                SphereRule.for_band(self.l_max))


def build_context(fld: CoefficientField, cfg: SolverConfig) -> OperatorContext:
    """Sample the field, gate admissibility, and assemble profiles."""
    if fld.dim != 3:
        raise DomainError("the solver grids are three-dimensional")
    rgrid, sphere = cfg.make_grids()
    report = check_conditions(fld.envelope, default_check_grid(),
                              n=fld.dim, delta_star=cfg.delta_threshold)
    if cfg.check_admissibility and not report.admissible:
        reasons = []
        total = report.dini_delta + report.dini_tail
        if not math.isfinite(total) or total > cfg.delta_threshold:
            reasons.append(f"square-Dini integral {total:.4g} exceeds "
                           f"threshold {cfg.delta_threshold}"
                           if math.isfinite(total) else
                           "square-Dini integral diverges")
        if not report.om2_holds:
            reasons.append("nonincreasing condition fails")
        if not report.om3_holds:
            reasons.append("nondecreasing condition fails")
        raise AdmissibilityError("; ".join(reasons) or "envelope not admissible")
    a_vals, a_inner = fld.sample(rgrid, sphere)
    prof = profiles(a_vals, rgrid, sphere, n=fld.dim,
                    alpha_margin=cfg.alpha_margin, a_inner_at_break=a_inner)
    tail = report.dini_tail if math.isfinite(report.dini_tail) else 0.0
    ctx = OperatorContext(fld=fld, rgrid=rgrid, sphere=sphere, a_vals=a_vals,
                          a_inner_at_break=a_inner, prof=prof,
                          envelope=fld.envelope,
                          delta=max(report.dini_delta + tail, 1e-12),
                          p=cfg.p, zero_mean_tol=cfg.zero_mean_tol)
    ctx.budget["dini_tail"] = tail
    ctx.admissibility = report
    return ctx


def _increment_norm(ctx: OperatorContext, dV: AnnularField) -> float:
    return x_norm(dV, ctx.envelope, ctx.delta, ctx.p, ctx.n)


def solve_fluctuation(ctx: OperatorContext, cfg: SolverConfig):
    """Neumann iteration V <- rhs - S V - T V from V = 0.

    Stops when the weighted-norm increment drops below the tolerance;
    reports per-step contraction ratios and raises on sustained
    non-contraction.
    """
    rhs = profile_step(ctx, np.ones(len(ctx.rgrid)))
    rhs_vals = -cfg.y0 * rhs.values
    rhs_rab = None if rhs.right_at_break is None else -cfg.y0 * rhs.right_at_break
    V = AnnularField(np.zeros_like(rhs_vals), ctx.rgrid, ctx.sphere)
    increments = []
    ratios = []
    converged = False
    rising = 0
    for it in range(cfg.max_iter):
        SV = fluct_step(ctx, V)
        TV = coupled_step(ctx, V)
        new_vals = rhs_vals - SV.values - TV.values
        rab = None
        if rhs_rab is not None or SV.right_at_break is not None:
            z = np.zeros(len(ctx.sphere), dtype=complex)
            rab = ((rhs_rab if rhs_rab is not None else z)
                   - (SV.right_at_break if SV.right_at_break is not None else z)
                   - (TV.right_at_break if TV.right_at_break is not None else z))
        dV = AnnularField(new_vals - V.values, ctx.rgrid, ctx.sphere)
        inc = _increment_norm(ctx, dV)
        increments.append(inc)
        if len(increments) >= 2 and increments[-2] > 0:
            ratio = inc / increments[-2]
            ratios.append(ratio)
            rising = rising + 1 if ratio >= 1.0 else 0
            if rising >= 3:
                raise DivergenceError(
                    f"no contraction after {it + 1} steps (ratio {ratio:.3f}); "
                    "shrink the coefficient perturbation or the support ball")
        V = AnnularField(new_vals, ctx.rgrid, ctx.sphere, rab)
        if inc <= cfg.tol_fixedpoint:
            converged = True
            break
    diagnostics = {
        "iterations": len(increments),
        "increments": increments,
        "contraction_ratios": ratios,
        "converged": converged,
        "final_increment": increments[-1] if increments else 0.0,
    }
    if not converged:
        raise DivergenceError(
            f"no convergence within {cfg.max_iter} iterations; "
            f"last increment {increments[-1]:.3e}")
    return V, diagnostics


@dataclass
class SolutionBundle:
    """The constructed solution with profiles and diagnostics."""

    solution: AnnularField
    fluctuation: AnnularField
    coupling_integral: RadialProfile
    mean_correction: RadialProfile
    prof: object
    leading: RadialProfile
    zeta: AnnularField
    c_star: complex
    z_infinity: complex
    envelope_delta: float
    diagnostics: dict = field(default_factory=dict)

    def tables(self) -> dict:
        """Per-radius tables for serialization."""
        g = self.solution.rgrid
        return {
            "profiles": {
                "r": g.nodes,
                "trace_mean": self.prof.trace_mean.values,
                "quad_mean": self.prof.quad_mean.values,
                "drift": self.prof.drift.values,
                "integrating_factor": self.prof.integrating_factor.values,
                "leading_term": self.leading.values,
                "coupling_integral": self.coupling_integral.values,
                "mean_correction": self.mean_correction.values,
            },
        }


def reconstruct(ctx: OperatorContext, cfg: SolverConfig, V: AnnularField,
                diagnostics: dict) -> SolutionBundle:
    """Assemble the solution from the fluctuation.

    Z = (E/quad_mean) (y0 + Y1 - mean(V a theta.theta) + quad_mean * V),
    then the leading-term ratio field zeta = Z/(c* y0 L) - 1, where c* is the
    measured limit of E/L at the inner edge of the grid.
    """
    g, sphere = ctx.rgrid, ctx.sphere
    E = ctx.prof.integrating_factor.values
    alpha = ctx.prof.quad_mean.values
    y1 = cumulative_coupling(ctx, V, check=False)
    th = sphere.nodes
    w = sphere.weights / SPHERE_AREA_3D
    quad_full = np.einsum("si,rsij,sj->rs", th, ctx.a_vals, th)
    mu = (V.values * quad_full) @ w
    mu_rab = None
    ib = g.break_index
    if ctx.a_inner_at_break is not None:
        v_right = V.right_at_break if V.right_at_break is not None else V.values[ib]
        mu_rab = complex(v_right @ w)  # a = I on the right side
    z_vals = (E[:, None] / alpha[:, None]
              * (cfg.y0 + y1.values[:, None] - mu[:, None] + alpha[:, None] * V.values))
    z_rab = None
    if ctx.a_inner_at_break is not None:
        v_right = V.right_at_break if V.right_at_break is not None else V.values[ib]
        z_rab = E[ib] * (cfg.y0 + y1.values[ib] - mu_rab + v_right)
    Z = AnnularField(z_vals, g, sphere, z_rab)
    mean_corr = RadialProfile(mu, g, mu_rab)
    leading = analysis.leading_term(ctx.prof, g)
    # limit of E/L at the inner edge; beyond B_1 both are constant
    ratio_profile = E / leading.values
    c_star = complex(ratio_profile[0])
    denom = c_star * np.asarray(cfg.y0) * leading.values
    zeta_vals = z_vals / denom[:, None] - 1.0
    zeta_rab = None if z_rab is None else z_rab / denom[ib] - 1.0
    zeta = AnnularField(zeta_vals, g, sphere, zeta_rab)
    z_inf = complex(cfg.y0 + y1.values[-1])
    diag = dict(diagnostics)
    diag["budget"] = dict(ctx.budget)
    return SolutionBundle(solution=Z, fluctuation=V, coupling_integral=y1,
                          mean_correction=mean_corr, prof=ctx.prof,
                          leading=leading, zeta=zeta, c_star=c_star,
                          z_infinity=z_inf, envelope_delta=ctx.delta,
                          diagnostics=diag)


def construct_solution(fld: CoefficientField, cfg: SolverConfig | None = None,
                       ctx: OperatorContext | None = None) -> SolutionBundle:
    cfg = cfg or SolverConfig()
    ctx = ctx or build_context(fld, cfg)
    V, diagnostics = solve_fluctuation(ctx, cfg)
    return reconstruct(ctx, cfg, V, diagnostics)


def radial_oracle(fld: CoefficientField, radii: np.ndarray,
                  y0: complex = 1.0 + 0.0j) -> np.ndarray:
    """Exact solution y0 * E(r)/quad_mean(r) for equivariant families.

    Uses adaptive one-dimensional quadrature of the drift, independent of
    every grid and sphere rule in the package.
    """
    if not fld.is_equivariant:
        raise DomainError("the radial oracle applies to equivariant fields only")
    beta, gamma = fld.radial_parts
    n = fld.dim

    def alpha(r):
        return np.asarray(beta(r), dtype=complex) + np.asarray(gamma(r), dtype=complex)

    def alpha0(r):
        return n * np.asarray(beta(r), dtype=complex) + np.asarray(gamma(r), dtype=complex)

    def drift_log(t):  # drift at r = e^t
        r = np.exp(t)
        return n - alpha0(r) / alpha(r)

    out = np.empty(len(radii), dtype=complex)
    for i, r in enumerate(np.asarray(radii, dtype=float)):
        if r > 1.0:
            out[i] = y0
            continue
        # left-closed at r = 1, matching the sampling convention there
        re = quad(lambda t: drift_log(np.array([t]))[0].real,
                  math.log(r), 0.0, limit=400)[0]
        im = quad(lambda t: drift_log(np.array([t]))[0].imag,
                  math.log(r), 0.0, limit=400)[0]
        out[i] = y0 * np.exp(re + 1j * im) / alpha(np.array([r]))[0]
    return out


def seed_linear(rgrid: RadialGrid, sphere: SphereRule) -> AnnularField:
    """The harmonic seed h(x) = x_1 on the product grid."""
    vals = rgrid.nodes[:, None] * sphere.nodes[None, :, 0]
    return AnnularField(vals.astype(complex), rgrid, sphere)


def solve_seeded(fld: CoefficientField, cfg: SolverConfig | None = None,
                 ctx: OperatorContext | None = None,
                 tol: float | None = None, max_iter: int | None = None):
    """Second weak solution from a degree-one harmonic seed.

    Iterates  w <- (Newtonian inversion of (a - I)(h + w))  with h = x_1 and
    no mean subtraction; the fixed point u = h + w solves the equation with a
    fluctuation decaying like r at the origin.  Convergence is measured in
    the annular mean against the seed's own scale.
    """
    cfg = cfg or SolverConfig()
    ctx = ctx or build_context(fld, cfg)
    tol = tol or cfg.tol_fixedpoint
    max_iter = max_iter or cfg.max_iter
    g, sphere = ctx.rgrid, ctx.sphere
    h = seed_linear(g, sphere)
    dev = ctx.deviation()
    dev_rab = ctx.deviation_right_at_break()
    w = AnnularField.zeros(g, sphere)
    scale_prof = p_mean_profile(h, cfg.p, ctx.n)
    scale = np.nanmax(scale_prof[g.nodes < 1.0])
    increments = []
    for it in range(max_iter):
        u_vals = h.values + w.values
        src_vals = dev * u_vals[:, :, None, None]
        rab = None
        if dev_rab is not None:
            rab = np.zeros((len(sphere), ctx.n, ctx.n), dtype=complex)
        src = MatrixField(src_vals, g, sphere, rab)
        new_w = ddiv_potential(src, subtract_mean=False, budget=ctx.budget)
        diff = AnnularField(new_w.values - w.values, g, sphere)
        mp = p_mean_profile(diff, cfg.p, ctx.n)
        inc = float(np.nanmax(mp[g.nodes < 1.0])) / max(scale, 1e-300)
        increments.append(inc)
        w = new_w
        if inc <= tol:
            break
    else:
        raise DivergenceError("seeded construction did not converge")
    u_rab = None
    if w.right_at_break is not None:
        u_rab = h.values[g.break_index] + w.right_at_break
    u = AnnularField(h.values + w.values, g, sphere, u_rab)
    return u, {"iterations": len(increments), "increments": increments}
