"""Leading-term asymptotics, boundedness criteria, envelopes, weak-form
residuals, and the two-solution decomposition experiment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from scipy.stats import qmc

from .coeff import CoefficientField
from .errors import DomainError
from .grids import AnnularField, RadialGrid, RadialProfile, p_mean_profile
from .modulus import ModulusOmega
from .sphharm import SPHERE_AREA_3D


# -- leading term and its factorization ---------------------------------------


def leading_term(prof, rgrid: RadialGrid) -> RadialProfile:
    """L(r) = exp(-int_r^1 (trace_mean - n quad_mean)(rho) d rho/rho), r <= 1.

    Extended by 1 beyond the unit ball.  This is the explicit exponential
    factor of the solution's asymptotics at the origin; on trace-preserving
    conformal perturbations it has a closed form used in tests.
    """
    integrand = prof.trace_mean.values - prof.n * prof.quad_mean.values
    jump = prof.trace_mean.right_at_break is not None
    pre = rgrid.cumulative(integrand, a=0.0, right_at_break=0.0 if jump else None)
    ib = rgrid.break_index
    vals = np.ones(len(rgrid), dtype=complex)
    vals[: ib + 1] = np.exp(-(pre[ib] - pre[: ib + 1]))
    return RadialProfile(vals, rgrid, right_at_break=1.0 if jump else None)


def factorization_check(bundle, mod: ModulusOmega | None = None) -> dict:
    """Deviation of E/(c* L) from 1 against the cumulative square-Dini bound.

    Returns the measured constant, per-radius deviations, and the fitted
    ratio sup |E/(c*L) - 1| / int_0^r Omega^2/t dt over the unit ball.
    """
    g = bundle.solution.rgrid
    E = bundle.prof.integrating_factor.values
    L = bundle.leading.values
    c_star = bundle.c_star
    dev = np.abs(E / (c_star * L) - 1.0)
    mod = mod or getattr(bundle, "_envelope", None)
    rows = {"r": g.nodes.copy(), "deviation": dev}
    fitted = None
    if mod is not None:
        om2 = np.asarray(mod(np.minimum(g.nodes, 1.0)), dtype=float) ** 2
        cum = g.cumulative(om2, a=0.0).real
        tail = mod.dini_tail(g.r_min) if mod.dini_tail else 0.0
        denom = cum + (tail if math.isfinite(tail) else 0.0)
        inner = (g.nodes < 1.0) & (denom > 0)
        fitted = float(np.max(dev[inner] / denom[inner])) if inner.any() else 0.0
        rows["dini_cumulative"] = denom
    return {"c_star": c_star, "rows": rows, "fitted_constant": fitted}


# -- boundedness / vanishing criterion ----------------------------------------


@dataclass
class BehaviorReport:
    """Criterion table and its extrapolated classification."""

    radii: np.ndarray
    criterion: np.ndarray
    classification: str
    extrapolated_limit: float | None
    decade_increments: list = field(default_factory=list)
    increment_ratio: float | None = None


def criterion_profile(prof, rgrid: RadialGrid) -> RadialProfile:
    """I(r) = int over B_1 minus B_r of Re(a_ii - n a.theta theta)/|y|^n dy.

    Reduced to |S^2| times the radial integral of the real part of the
    stabilization mean against d rho/rho.
    """
    integrand = np.real(prof.trace_mean.values - prof.n * prof.quad_mean.values)
    jump = prof.trace_mean.right_at_break is not None
    pre = rgrid.cumulative(integrand, a=0.0, right_at_break=0.0 if jump else None)
    ib = rgrid.break_index
    vals = np.zeros(len(rgrid))
    vals[: ib + 1] = SPHERE_AREA_3D * (pre[ib].real - pre[: ib + 1].real)
    return RadialProfile(vals.astype(complex), rgrid)


def classify_criterion(prof, rgrid: RadialGrid,
                       ratio_threshold: float = 0.7,
                       abs_tol: float = 1e-3,
                       trend_tol: float = 0.25) -> BehaviorReport:
    """Classify the r -> 0 behavior from per-decade increments.

    Increments of the criterion over the last three grid decades decide:
    negligible increments mean a finite limit already reached; a decaying
    increment ratio extrapolates geometrically to "bounded"; a ratio near 1
    signals slow divergence, "vanishing" or "unbounded" by sign; conflicting
    trends are labeled indeterminate.
    """
    crit = criterion_profile(prof, rgrid)
    r = rgrid.nodes
    inner = r <= 1.0
    decades = int(math.floor(math.log10(1.0 / rgrid.r_min)))
    if decades < 3:
        raise DomainError("classification needs at least three grid decades")
    marks = [rgrid.index_of(10.0 ** -j) for j in range(4)]
    vals = crit.values.real
    d1 = vals[marks[1]] - vals[marks[0]]
    d2 = vals[marks[2]] - vals[marks[1]]
    d3 = vals[marks[3]] - vals[marks[2]]
    scale = max(1.0, abs(vals[marks[3]]))
    report = BehaviorReport(radii=r[inner], criterion=vals[inner],
                            classification="indeterminate",
                            extrapolated_limit=None,
                            decade_increments=[d1, d2, d3])
    if max(abs(d2), abs(d3)) <= abs_tol * scale:
        report.classification = "bounded"
        report.extrapolated_limit = float(vals[marks[3]])
        return report
    if d2 * d3 <= 0:
        return report  # conflicting signs: indeterminate
    rho = d3 / d2
    report.increment_ratio = float(rho)
    rho_prev = d2 / d1 if abs(d1) > 0 else None
    if rho_prev is not None and d1 * d2 > 0 and abs(rho - rho_prev) > trend_tol:
        return report
    if rho >= ratio_threshold:
        report.classification = "vanishing" if d3 > 0 else "unbounded"
    else:
        report.classification = "bounded"
        report.extrapolated_limit = float(vals[marks[3]] + d3 * rho / (1 - rho))
    return report


# -- envelopes -----------------------------------------------------------------


def envelope_bounds(mod: ModulusOmega, r_set: np.ndarray, n: int = 3):
    """Corollary-style two-sided envelope exp(-+ 2(n-1) int_r^1 Omega ds/s)."""
    lows, highs = [], []
    for r in np.atleast_1d(r_set):
        if not 0 < r <= 1:
            raise DomainError("envelope radii must lie in (0, 1]")
        val, _ = quad(lambda u: float(mod(math.exp(u))), math.log(r), 0.0,
                      limit=200)
        lows.append(math.exp(-2 * (n - 1) * val))
        highs.append(math.exp(2 * (n - 1) * val))
    return np.asarray(lows), np.asarray(highs)


def fit_envelope_constants(mp: np.ndarray, lower: np.ndarray,
                           upper: np.ndarray) -> tuple[float, float]:
    """Largest c1 and smallest c2 with c1*lower <= mp <= c2*upper."""
    ok = np.isfinite(mp) & (mp > 0)
    c1 = float(np.min(mp[ok] / lower[ok]))
    c2 = float(np.max(mp[ok] / upper[ok]))
    return c1, c2


def power_window_constant(mod: ModulusOmega, delta: float, n: int = 3,
                          c_chk: float | None = None) -> float:
    """Exponent gamma with r^gamma <= envelope growth <= r^-gamma on (0,1).

    From Omega <= c_chk sqrt(delta): the envelope exponent is at most
    2(n-1) c_chk sqrt(delta).
    """
    if c_chk is None:
        eps = mod.epsilon
        c_chk = ((1.0 - 2.0 ** (-(2 - 2 * eps))) / (2 - 2 * eps)) ** -0.5
    return 2 * (n - 1) * c_chk * math.sqrt(delta)


# -- pointwise matrix inequality ----------------------------------------------


def matrix_mean_inequality(M: np.ndarray, thetas: np.ndarray,
                           rtol: float = 1e-12) -> tuple[bool, float]:
    """Check -2(n-1)|M| <= tr M - n theta.M theta <= 2(n-1)|M| for unit thetas.

    Returns (holds, worst margin); M must be real symmetric.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[-1]
    if not np.allclose(M, M.T, atol=0):
        raise DomainError("matrix must be symmetric")
    norm = float(np.abs(np.linalg.eigvalsh(M)).max()) if M.any() else 0.0
    vals = np.trace(M) - n * np.einsum("si,ij,sj->s", thetas, M, thetas)
    bound = 2 * (n - 1) * norm
    margin = float(bound - np.abs(vals).max())
    return margin >= -rtol * max(bound, 1.0), margin


# -- field evaluation off the grid --------------------------------------------


class _UniformSpline:
    """Fast evaluation of a cubic spline on a uniform grid (vectorized gather)."""

    def __init__(self, t: np.ndarray, values: np.ndarray):
        self.t0 = float(t[0])
        self.h = float(t[1] - t[0])
        self.n = len(t)
        self.c = CubicSpline(t, values, axis=0).c  # (4, n-1, ...)

    def __call__(self, tq: np.ndarray) -> np.ndarray:
        idx = np.clip(((tq - self.t0) / self.h).astype(int), 0, self.n - 2)
        dt = (tq - (self.t0 + idx * self.h))[:, None]
        c = self.c
        return ((c[0][idx] * dt + c[1][idx]) * dt + c[2][idx]) * dt + c[3][idx]


class FieldEvaluator:
    """Evaluate an annular field anywhere in the grid span.

    Harmonic coefficients are splined in log r per segment (the two sides of
    r = 1 are independent, since coefficient-derived fields may jump there);
    the angular synthesis is exact for the field's band limit.
    """

    def __init__(self, fld: AnnularField):
        self.rgrid = fld.rgrid
        self.sphere = fld.sphere
        coeffs = fld.coefficients()
        ib = self.rgrid.break_index
        t = self.rgrid.t
        self._left = _UniformSpline(t[: ib + 1], coeffs[: ib + 1])
        right = coeffs[ib:].copy()
        if fld.right_at_break is not None:
            right[0] = self.sphere.transform(fld.right_at_break)
        self._right = _UniformSpline(t[ib:], right)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=-1)
        if np.any(r < self.rgrid.r_min * (1 - 1e-12)) \
                or np.any(r > self.rgrid.r_max * (1 + 1e-12)):
            raise DomainError("evaluation point outside grid span")
        t = np.log(r)
        dirs = pts / r[:, None]
        Y = self.sphere.basis.evaluate(dirs)
        out = np.empty(len(pts), dtype=complex)
        left = r < 1.0
        if left.any():
            out[left] = np.einsum("pk,kp->p", self._left(t[left]), Y[:, left])
        if (~left).any():
            out[~left] = np.einsum("pk,kp->p", self._right(t[~left]), Y[:, ~left])
        return out


# -- smooth test functions and the weak residual -------------------------------


def _bump(s):
    """exp(-1/(1-s)) for s < 1, with first and second s-derivatives."""
    s = np.asarray(s, dtype=float)
    inside = s < 1.0
    b = np.zeros_like(s)
    b1 = np.zeros_like(s)
    b2 = np.zeros_like(s)
    si = s[inside]
    g = 1.0 / (1.0 - si)
    e = np.exp(-g)
    b[inside] = e
    b1[inside] = -e * g * g
    b2[inside] = e * (g ** 4 - 2 * g ** 3)
    return b, b1, b2


@dataclass
class BallBump:
    """C^infinity bump supported on |x - center| < radius, analytic Hessian."""

    center: np.ndarray
    radius: float

    def value(self, pts):
        d = np.atleast_2d(pts) - self.center
        s = (d * d).sum(axis=-1) / self.radius ** 2
        return _bump(s)[0]

    def hessian(self, pts):
        pts = np.atleast_2d(pts)
        d = pts - self.center
        s = (d * d).sum(axis=-1) / self.radius ** 2
        _, b1, b2 = _bump(s)
        eye = np.eye(3)
        return (b2[:, None, None] * 4 * d[:, :, None] * d[:, None, :] / self.radius ** 4
                + b1[:, None, None] * 2 * eye / self.radius ** 2)

    def hessian_sup(self) -> float:
        ss = np.linspace(0, 1, 2001)[:-1]
        _, b1, b2 = _bump(ss)
        vals = np.abs(4 * b2 * ss + 2 * b1) + 2 * np.abs(b1)
        return float(vals.max()) / self.radius ** 2

    def support(self) -> tuple[float, float]:
        c = float(np.linalg.norm(self.center))
        return max(c - self.radius, 0.0), c + self.radius


@dataclass
class ShellBump:
    """Radial C^infinity bump in log r around r = center, annular support."""

    center: float = 1.0
    half_width_log: float = math.log(1.5)

    def _s(self, rho):
        u = np.log(np.asarray(rho, dtype=float) / self.center)
        return (u / self.half_width_log) ** 2, u

    def value(self, pts):
        rho = np.linalg.norm(np.atleast_2d(pts), axis=-1)
        return _bump(self._s(rho)[0])[0]

    def hessian(self, pts):
        pts = np.atleast_2d(pts)
        rho = np.linalg.norm(pts, axis=-1)
        s, u = self._s(rho)
        b, b1, b2 = _bump(s)
        W2 = self.half_width_log ** 2
        fp = b1 * 2 * u / W2 / rho
        fpp = (b2 * 4 * u * u / W2 ** 2 + b1 * 2 / W2 - b1 * 2 * u / W2) / rho ** 2
        theta = pts / rho[:, None]
        tt = theta[:, :, None] * theta[:, None, :]
        eye = np.eye(3)
        return fpp[:, None, None] * tt + (fp / rho)[:, None, None] * (eye - tt)

    def hessian_sup(self) -> float:
        rr = self.center * np.exp(np.linspace(-1, 1, 4001)[1:-1] * self.half_width_log)
        h = self.hessian(rr[:, None] * np.array([[0.234, -0.77, 0.59]])
                         / np.linalg.norm([0.234, -0.77, 0.59]))
        return float(np.linalg.norm(h, ord=2, axis=(1, 2)).max())

    def support(self) -> tuple[float, float]:
        w = math.exp(self.half_width_log)
        return self.center / w, self.center * w


def bump_battery(seed: int = 1234, count: int = 20,
                 rho_range: tuple[float, float] = (0.05, 0.6),
                 scales: tuple[float, ...] = (0.5, 0.25, 0.125),
                 far_centers: tuple[float, ...] = (3.0, 6.0)):
    """Quasi-random ball bumps at three dyadic scales, one shell bump across
    r = 1, and far-field bumps where the coefficients are the identity."""
    halton = qmc.Halton(d=3, seed=seed)
    draws = halton.random(count)
    bumps = []
    for i, (u1, u2, u3) in enumerate(draws):
        rho0 = rho_range[0] * (rho_range[1] / rho_range[0]) ** u1
        z = 2 * u2 - 1
        phi = 2 * math.pi * u3
        st = math.sqrt(max(1 - z * z, 0.0))
        direction = np.array([st * math.cos(phi), st * math.sin(phi), z])
        radius = scales[i % len(scales)] * rho0
        bumps.append(BallBump(center=rho0 * direction, radius=radius))
    bumps.append(ShellBump())
    for c in far_centers:
        bumps.append(BallBump(center=np.array([0.0, 0.0, c]), radius=c / 3.0))
    return bumps


def _cap_quadrature(bump: BallBump, n_rad: int, n_polar: int, n_az: int,
                    r_lo: float, r_hi: float):
    """Product quadrature over the spherical cap cone containing the bump."""
    c = float(np.linalg.norm(bump.center))
    lo, hi = bump.support()
    lo, hi = max(lo, r_lo), min(hi, r_hi)
    axis = bump.center / c
    # frame completion
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    sin_g = min(bump.radius / c, 1.0)
    u_min = math.cos(math.asin(sin_g)) if sin_g < 1 else -1.0
    xg, wg = np.polynomial.legendre.leggauss(n_polar)
    u = 0.5 * (u_min + 1) + 0.5 * (1 - u_min) * xg
    wu = 0.5 * (1 - u_min) * wg
    phi = 2 * math.pi * (np.arange(n_az) + 0.5) / n_az
    wphi = 2 * math.pi / n_az
    tr, wtr = np.polynomial.legendre.leggauss(n_rad)
    t = 0.5 * (math.log(lo) + math.log(hi)) + 0.5 * (math.log(hi) - math.log(lo)) * tr
    wt = 0.5 * (math.log(hi) - math.log(lo)) * wtr
    rho = np.exp(t)
    st = np.sqrt(1 - u ** 2)
    dirs = (u[:, None, None] * axis[None, None, :]
            + st[:, None, None] * (np.cos(phi)[None, :, None] * e1
                                   + np.sin(phi)[None, :, None] * e2))
    pts = rho[:, None, None, None] * dirs[None, :, :, :]
    wts = np.broadcast_to((wt * rho ** 3)[:, None, None] * wu[None, :, None] * wphi,
                          pts.shape[:-1])
    return pts.reshape(-1, 3), wts.ravel()


def _shell_quadrature(bump: ShellBump, sphere_rule, n_rad: int,
                      r_lo: float, r_hi: float):
    lo, hi = bump.support()
    lo, hi = max(lo, r_lo), min(hi, r_hi)
    tr, wtr = np.polynomial.legendre.leggauss(n_rad)
    t = 0.5 * (math.log(lo) + math.log(hi)) + 0.5 * (math.log(hi) - math.log(lo)) * tr
    wt = 0.5 * (math.log(hi) - math.log(lo)) * wtr
    rho = np.exp(t)
    pts = rho[:, None, None] * sphere_rule.nodes[None, :, :]
    wts = (wt * rho ** 3)[:, None] * sphere_rule.weights[None, :]
    return pts.reshape(-1, 3), wts.ravel()


def weak_residual(u_eval, fld: CoefficientField, bump, sphere_rule=None,
                  n_rad: int = 64, n_polar: int = 32, n_az: int = 64,
                  r_lo: float | None = None, r_hi: float | None = None) -> complex:
    """Quadrature of  int a_ij u d_i d_j eta dx  for a smooth test function.

    Near zero for weak solutions; the quadrature grid is dedicated to the
    bump's support and must be refined together with the solution grids in
    convergence studies.
    """
    r_lo = r_lo if r_lo is not None else u_eval.rgrid.r_min
    r_hi = r_hi if r_hi is not None else u_eval.rgrid.r_max
    lo, hi = bump.support()
    if lo < r_lo * (1 - 1e-12) or hi > r_hi * (1 + 1e-12):
        raise DomainError("test function support leaves the grid span")
    if isinstance(bump, ShellBump):
        if sphere_rule is None:
            raise DomainError("shell bumps need a sphere rule")
        pts, wts = _shell_quadrature(bump, sphere_rule, n_rad, r_lo, r_hi)
    else:
        pts, wts = _cap_quadrature(bump, n_rad, n_polar, n_az, r_lo, r_hi)
    a = fld(pts)
    hess = bump.hessian(pts)
    uu = u_eval(pts)
    integrand = uu * np.einsum("mij,mij->m", a, hess.astype(complex))
    return complex((wts * integrand).sum())


# -- far field ------------------------------------------------------------------


def z_infinity(Z: AnnularField, fit_window: tuple[float, float] = (2.0, 10.0),
               floor_rel: float = 1e-12) -> dict:
    """Limit at infinity and the decay rate of the deviation from it.

    The limit is the volume mean of Z over the outermost grid decade; the
    decay report fits the L^1 annular mean of Z minus the limit against
    r^(-n).  A sentinel exponent -inf is reported when the deviation sits at
    the numerical floor everywhere in the window.
    """
    g = Z.rgrid
    if g.r_max < 4.0:
        raise DomainError("far-field analysis needs r_max >= 4")
    means = Z.sphere_means().values
    outer = g.nodes >= g.r_max / 10.0
    z_inf = complex(np.mean(means[outer]))
    dev = Z.copy_with(Z.values - z_inf,
                      None if Z.right_at_break is None
                      else Z.right_at_break - z_inf)
    m1 = p_mean_profile(dev, p=1.0)
    lo, hi = fit_window
    sel = (g.nodes >= lo) & (g.nodes <= hi) & np.isfinite(m1)
    floor = floor_rel * max(abs(z_inf), 1.0)
    radii = g.nodes[sel]
    vals = m1[sel]
    live = vals > floor
    if live.sum() < 2:
        return {"z_infinity": z_inf, "exponent": -math.inf,
                "radii": radii, "deviations": vals}
    slope = np.polyfit(np.log(radii[live]), np.log(vals[live]), 1)[0]
    return {"z_infinity": z_inf, "exponent": float(slope),
            "radii": radii, "deviations": vals}


# -- decomposition -------------------------------------------------------------


def _annulus_inner_products(u: AnnularField, Z: AnnularField, indices, n: int = 3):
    g = u.rgrid
    m = g.per_octave
    cross = (np.conj(Z.values) * u.values) @ u.sphere.weights
    zz = (np.abs(Z.values) ** 2) @ u.sphere.weights
    pc = g.cumulative(cross, a=float(n))
    pz = g.cumulative(zz, a=float(n))
    num = np.array([pc[i + m] - pc[i] for i in indices])
    den = np.array([pz[i + m] - pz[i] for i in indices])
    return num, den


def decompose(u: AnnularField, Z: AnnularField,
              fit_window: tuple[float, float] = (1e-3, 0.5),
              eps1: float = 0.1, p: float = 2.0,
              slope_tol: float = 0.1, floor_rel: float = 1e-11) -> dict:
    """Split u = C Z + w and measure the remainder's decay slope.

    C minimizes the summed squared annular means of u - C Z over the
    smallest decade of the fit window (where any admissible Z dominates the
    remainder); the slope of M_p(w, r) over the full window is fitted in
    log-log and compared against 1 - eps1 - slope_tol.
    """
    g = u.rgrid
    lo, hi = fit_window
    if not (g.r_min <= lo < hi <= 1.0):
        raise DomainError("fit window must sit inside the grid and the unit ball")
    i_lo = g.index_of(lo)
    i_decade = g.index_of(min(10 * lo, hi))
    indices = np.arange(i_lo, i_decade + 1)
    num, den = _annulus_inner_products(u, Z, indices)
    if float(np.abs(den).sum()) < 1e-28:
        raise DomainError("reference solution vanishes on the fit window")
    C = complex(num.sum() / den.sum())
    if p != 2.0:
        from scipy.optimize import minimize

        def objective(ab):
            c = ab[0] + 1j * ab[1]
            w = u.copy_with(u.values - c * Z.values)
            mp = p_mean_profile(w, p)
            return float(np.nansum(mp[indices] ** 2))

        res = minimize(objective, [C.real, C.imag], method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-20})
        C = complex(res.x[0] + 1j * res.x[1])
    w_rab = None
    if u.right_at_break is not None or Z.right_at_break is not None:
        ib = g.break_index
        u_r = u.right_at_break if u.right_at_break is not None else u.values[ib]
        z_r = Z.right_at_break if Z.right_at_break is not None else Z.values[ib]
        w_rab = u_r - C * z_r
    w = u.copy_with(u.values - C * Z.values, w_rab)
    mp = p_mean_profile(w, p)
    sel = (g.nodes >= lo) & (g.nodes <= hi) & np.isfinite(mp)
    scale = np.nanmax(p_mean_profile(u, p)[sel]) if sel.any() else 1.0
    vals = mp[sel]
    live = vals > floor_rel * max(scale, 1e-300)
    if live.sum() < 2:
        slope = math.inf
    else:
        slope = float(np.polyfit(np.log(g.nodes[sel][live]), np.log(vals[live]), 1)[0])
    return {"C": C, "w": w, "slope": slope,
            "slope_threshold": 1.0 - eps1 - slope_tol,
            "pass": slope >= 1.0 - eps1 - slope_tol}
