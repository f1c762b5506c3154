"""Spherical-mean profiles of the coefficients and the conjugated operators
entering the fixed-point equation for the angular fluctuation.

Profiles: trace mean, quadratic mean, the drift n - trace/quad ratio, and its
integrating factor exp(int_r^inf drift dt/t).  Operators: the coupling of the
fluctuation into the radial channel, the two matrix sources fed to the
potential inversion, and the three conjugated steps used by the solver's
Neumann iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coeff import CoefficientField
from .errors import ContractViolationError, DegenerateProfileError, DomainError
from .grids import AnnularField, RadialGrid, RadialProfile, SphereRule
from .modulus import ModulusOmega
from .potential import MatrixField, ddiv_potential
from .sphharm import SPHERE_AREA_3D


@dataclass
class ProfileBundle:
    """Radial profiles derived from the coefficient field.

    trace_mean(r)   spherical mean of a_ii(r theta)
    quad_mean(r)    spherical mean of a_ij(r theta) theta_i theta_j
    drift(r)        n - trace_mean/quad_mean
    integrating_factor(r)  exp(int_r^rmax drift dt/t); identically 1 beyond B_1
    """

    trace_mean: RadialProfile
    quad_mean: RadialProfile
    drift: RadialProfile
    integrating_factor: RadialProfile
    n: int


def profiles(a_vals: np.ndarray, rgrid: RadialGrid, sphere: SphereRule,
             n: int = 3, alpha_margin: float = 0.2,
             a_inner_at_break: np.ndarray | None = None) -> ProfileBundle:
    """Sphere-quadrature profiles with a nondegeneracy gate on the quad mean.

    ``a_vals`` holds the inner limit on the r = 1 shell when the family jumps
    there; the right limits are the identity values by construction.
    """
    th = sphere.nodes
    tr = np.einsum("rsii->rs", a_vals) @ sphere.weights / SPHERE_AREA_3D
    quad = np.einsum("si,rsij,sj->rs", th, a_vals, th) @ sphere.weights / SPHERE_AREA_3D
    ib = rgrid.break_index
    # beyond the unit ball the coefficients are the identity: pin exactly
    tr[ib + 1:] = n
    quad[ib + 1:] = 1.0
    amin_idx = int(np.argmin(np.abs(quad)))
    if abs(quad[amin_idx]) < alpha_margin:
        raise DegenerateProfileError(float(rgrid.nodes[amin_idx]),
                                     complex(quad[amin_idx]), alpha_margin)
    drift = n - tr / quad
    jump = a_inner_at_break is not None
    e_vals = np.exp(rgrid.suffix(drift, a=0.0,
                                 right_at_break=0.0 if jump else None))
    mk = lambda v, rab: RadialProfile(v, rgrid, rab)  # noqa: E731
    return ProfileBundle(
        trace_mean=mk(tr, float(n) if jump else None),
        quad_mean=mk(quad, 1.0 if jump else None),
        drift=mk(drift, 0.0 if jump else None),
        integrating_factor=mk(e_vals, None),  # continuous across r = 1
        n=n)


@dataclass
class OperatorContext:
    """Immutable context shared by all operator applications."""

    fld: CoefficientField
    rgrid: RadialGrid
    sphere: SphereRule
    a_vals: np.ndarray
    a_inner_at_break: np.ndarray | None
    prof: ProfileBundle
    envelope: ModulusOmega
    delta: float
    p: float = 2.0
    zero_mean_tol: float = 1e-8
    budget: dict = field(default_factory=dict)
    admissibility: object = None

    @property
    def n(self) -> int:
        return self.prof.n

    def deviation(self) -> np.ndarray:
        """a - I on the grid (inner values on the r = 1 shell)."""
        return self.a_vals - np.eye(self.n)

    def deviation_right_at_break(self) -> np.ndarray | None:
        if self.a_inner_at_break is None:
            return None
        return np.zeros((len(self.sphere), self.n, self.n), dtype=complex)

    def check_zero_mean(self, V: AnnularField, what: str):
        defect = V.max_mean_defect()
        scale = max(V.max_abs(), 1e-300)
        if defect > self.zero_mean_tol * scale:
            raise ContractViolationError(
                f"{what} requires zero spherical mean; defect {defect:.3e} "
                f"against scale {scale:.3e}")


def coupling_profile(ctx: OperatorContext, V: AnnularField,
                     check: bool = True) -> RadialProfile:
    """Radial drive from the zero-mean fluctuation.

    Zero-mean form: mean of V (a_ii - n) minus (trace/quad ratio) times the
    mean of V (a theta . theta - 1); vanishes identically on equivariant
    coefficient families.
    """
    if check:
        ctx.check_zero_mean(V, "the coupling operator")
    th = ctx.sphere.nodes
    w = ctx.sphere.weights / SPHERE_AREA_3D
    tr_dev = np.einsum("rsii->rs", ctx.a_vals) - ctx.n
    quad_dev = np.einsum("si,rsij,sj->rs", th, ctx.a_vals, th) - 1.0
    ratio = ctx.prof.trace_mean.values / ctx.prof.quad_mean.values
    vals = ((V.values * tr_dev) @ w
            - ratio * ((V.values * quad_dev) @ w))
    # both deviation factors vanish on the outside limit at r = 1
    rab = 0.0 if ctx.a_inner_at_break is not None else None
    return RadialProfile(vals, ctx.rgrid, rab)


def fluctuation_source(ctx: OperatorContext, v: AnnularField,
                       check: bool = True) -> MatrixField:
    """(a - I) times the corrected fluctuation, fed to the inversion."""
    if check:
        ctx.check_zero_mean(v, "the fluctuation source")
    th = ctx.sphere.nodes
    w = ctx.sphere.weights / SPHERE_AREA_3D
    quad_dev = np.einsum("si,rsij,sj->rs", th, ctx.a_vals, th) - 1.0
    corr = ((v.values * quad_dev) @ w) / ctx.prof.quad_mean.values
    corrected = v.values - corr[:, None]
    vals = ctx.deviation() * corrected[:, :, None, None]
    rab = None
    if ctx.a_inner_at_break is not None:
        rab = np.zeros((len(ctx.sphere), ctx.n, ctx.n), dtype=complex)
    return MatrixField(vals, ctx.rgrid, ctx.sphere, rab)


def mean_source(ctx: OperatorContext, radial: np.ndarray) -> MatrixField:
    """(a - I)/quad_mean times a radial factor, as a matrix source."""
    phi = ctx.deviation() / ctx.prof.quad_mean.values[:, None, None, None]
    vals = phi * np.asarray(radial)[:, None, None, None]
    rab = None
    if ctx.a_inner_at_break is not None:
        rab = np.zeros((len(ctx.sphere), ctx.n, ctx.n), dtype=complex)
    return MatrixField(vals, ctx.rgrid, ctx.sphere, rab)


def phi_matrix(ctx: OperatorContext) -> MatrixField:
    """The normalized deviation (a - I)/quad_mean itself."""
    return mean_source(ctx, np.ones(len(ctx.rgrid)))


def fluct_step(ctx: OperatorContext, V: AnnularField) -> AnnularField:
    """Conjugated fluctuation operator: -E^-1 G(B(E V))."""
    E = ctx.prof.integrating_factor.values
    EV = V.copy_with(V.values * E[:, None],
                     None if V.right_at_break is None
                     else V.right_at_break * E[ctx.rgrid.break_index])
    src = fluctuation_source(ctx, EV)
    pot = ddiv_potential(src, subtract_mean=True, budget=ctx.budget)
    vals = -pot.values / E[:, None]
    rab = None
    if pot.right_at_break is not None:
        rab = -pot.right_at_break / E[ctx.rgrid.break_index]
    return AnnularField(vals, ctx.rgrid, ctx.sphere, rab)


def profile_step(ctx: OperatorContext, yprof: np.ndarray) -> AnnularField:
    """Conjugated radial-source operator: -E^-1 G(phi * E * y)."""
    E = ctx.prof.integrating_factor.values
    src = mean_source(ctx, np.asarray(yprof) * E)
    pot = ddiv_potential(src, subtract_mean=True, budget=ctx.budget)
    vals = -pot.values / E[:, None]
    rab = None
    if pot.right_at_break is not None:
        rab = -pot.right_at_break / E[ctx.rgrid.break_index]
    return AnnularField(vals, ctx.rgrid, ctx.sphere, rab)


def cumulative_coupling(ctx: OperatorContext, V: AnnularField,
                        check: bool = True) -> RadialProfile:
    """Y1(r) = int_0^r (coupling V)(t) dt/t, with sub-grid completion.

    Below the grid the integrand is extrapolated proportionally to the
    squared envelope, whose tail integral is finite by admissibility; the
    magnitude of the completion is recorded in the error budget.
    """
    kv = coupling_profile(ctx, V, check=check)
    vals = ctx.rgrid.cumulative(kv.values, a=0.0, right_at_break=kv.right_at_break)
    om0 = float(ctx.envelope(ctx.rgrid.r_min))
    tail_bound = ctx.envelope.dini_tail(ctx.rgrid.r_min) \
        if ctx.envelope.dini_tail is not None else om0 ** 2
    if om0 > 0 and math.isfinite(tail_bound):
        completion = complex(kv.values[0]) / om0 ** 2 * tail_bound
    else:
        completion = 0.0
    ctx.budget["coupling_subgrid"] = max(ctx.budget.get("coupling_subgrid", 0.0),
                                         abs(completion))
    return RadialProfile(vals + completion, ctx.rgrid)


def coupled_step(ctx: OperatorContext, V: AnnularField) -> AnnularField:
    """Conjugated composite operator: profile_step of the cumulative coupling."""
    y1 = cumulative_coupling(ctx, V)
    return profile_step(ctx, y1.values)
