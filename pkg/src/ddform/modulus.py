"""Stabilization moduli: admissible bounds Omega(r) for |a(x) - I| on annuli.

A modulus lives on (0, 1] and is extended by zero beyond r = 1.  Admissibility
combines a square-Dini condition (the integral of Omega^2(t)/t must be small)
with two power-weighted monotonicity conditions checked by discrete scans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .errors import DomainError


@dataclass
class ModulusOmega:
    """A stabilization modulus with its monotonicity exponent.

    ``inner`` evaluates the modulus on (0, 1]; calls clamp to zero for r > 1.
    ``dini_tail`` bounds the integral of Omega^2/t over (0, r) in closed form
    when the family has one (None means: fall back to the monotone-extension
    bound derived from the nonincreasing condition).
    """

    inner: Callable[[np.ndarray], np.ndarray]
    epsilon: float = 0.2
    params: dict = field(default_factory=dict)
    label: str = "custom"
    dini_tail: Callable[[float], float] | None = None

    def __call__(self, r):
        r_arr = np.asarray(r, dtype=float)
        if np.any(r_arr <= 0):
            raise DomainError("modulus argument must be positive")
        out = np.zeros_like(r_arr)
        inside = r_arr <= 1.0
        if inside.any():
            out[inside] = self.inner(r_arr[inside])
        if np.any(out < 0):
            raise DomainError("modulus produced a negative value")
        return out if out.ndim else float(out)


def zero_modulus() -> ModulusOmega:
    return ModulusOmega(inner=lambda r: np.zeros_like(r), label="zero",
                        params={}, dini_tail=lambda r: 0.0)


def log_modulus(kappa: float, s: float, epsilon: float | None = None) -> ModulusOmega:
    """Omega(r) = kappa * (log(e/r))^(-s) on (0, 1].

    The square-Dini integral over (0, r) is kappa^2 u^(1-2s)/(2s-1) with
    u = log(e/r); it diverges for s <= 1/2.  The nonincreasing condition
    holds on all of (0, 1) only when epsilon <= 1 - s.
    """
    if kappa < 0:
        raise DomainError("kappa must be nonnegative")
    if epsilon is None:
        epsilon = max(0.05, min(0.45, 0.8 * (1.0 - s)))

    def inner(r):
        return kappa * np.log(np.e / r) ** (-s)

    def tail(r_lo: float) -> float:
        if s <= 0.5:
            return math.inf
        u = math.log(math.e / r_lo)
        return kappa ** 2 * u ** (1 - 2 * s) / (2 * s - 1)

    return ModulusOmega(inner=inner, epsilon=epsilon, label="log",
                        params={"kappa": kappa, "s": s}, dini_tail=tail)


def power_modulus(kappa: float, alpha: float, epsilon: float | None = None) -> ModulusOmega:
    """Omega(r) = kappa * r^alpha on (0, 1], alpha in (0, 1)."""
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    if epsilon is None:
        epsilon = max(0.05, min(0.45, 0.8 * (1.0 - alpha)))
    return ModulusOmega(
        inner=lambda r: kappa * r ** alpha,
        epsilon=epsilon, label="power", params={"kappa": kappa, "alpha": alpha},
        dini_tail=lambda r: kappa ** 2 * r ** (2 * alpha) / (2 * alpha))


def tabulated_modulus(radii: np.ndarray, values: np.ndarray, epsilon: float,
                      below: Callable[[np.ndarray], np.ndarray] | None = None,
                      dini_tail=None, label: str = "table") -> ModulusOmega:
    """Modulus interpolated geometrically (log-log) between table nodes.

    Log-linear interpolation preserves the discrete power-weighted
    monotonicity conditions between nodes.  Below the table, ``below`` is
    used when given, else the first table value is held.
    """
    radii = np.asarray(radii, dtype=float)
    values = np.asarray(values, dtype=float)
    logs_r = np.log(radii)
    safe = np.log(np.maximum(values, 1e-300))

    def inner(r):
        r = np.asarray(r, dtype=float)
        out = np.exp(np.interp(np.log(r), logs_r, safe))
        lo = r < radii[0]
        if lo.any():
            out[lo] = below(r[lo]) if below is not None else values[0]
        return np.where(out <= 1e-290, 0.0, out)

    return ModulusOmega(inner=inner, epsilon=epsilon, label=label,
                        dini_tail=dini_tail)


def omega_eval(mod: ModulusOmega, r: float) -> float:
    """Modulus value at a single radius."""
    return float(mod(float(r)))


def dini_integral(mod: ModulusOmega, r_lo: float, r_hi: float) -> float:
    """Adaptive quadrature of Omega^2(t)/t over [r_lo, r_hi]."""
    if not (0 < r_lo < r_hi <= 1):
        raise DomainError("need 0 < r_lo < r_hi <= 1")

    def integrand(u):  # u = log t
        return float(mod(math.exp(u))) ** 2

    val, _ = quad(integrand, math.log(r_lo), math.log(r_hi), limit=200)
    return val


@dataclass
class OmegaReport:
    """Admissibility verdict for a modulus on a check grid."""

    dini_delta: float
    dini_tail: float
    om2_holds: bool
    om3_holds: bool
    sup_omega: float
    sqrt_delta_bound_ok: bool
    c_chk: float
    delta_star: float
    epsilon: float

    @property
    def admissible(self) -> bool:
        return (self.om2_holds and self.om3_holds
                and self.dini_delta + self.dini_tail <= self.delta_star)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "dini_delta", "dini_tail", "sup_omega", "c_chk", "delta_star",
            "epsilon")}
        d.update(om2_holds=self.om2_holds, om3_holds=self.om3_holds,
                 sqrt_delta_bound_ok=self.sqrt_delta_bound_ok,
                 admissible=self.admissible)
        return d


def check_conditions(mod: ModulusOmega, grid: np.ndarray, n: int = 3,
                     delta_star: float = 0.05,
                     rel_tol: float = 1e-9) -> OmegaReport:
    """Scan the monotonicity conditions and the square-Dini smallness.

    The scans are discrete over the supplied strictly increasing grid in
    (0, 1); the integral below the smallest grid point is estimated by the
    family's closed-form tail when available, else by the monotone-extension
    bound, and reported separately.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise DomainError("check grid is empty")
    if np.any(np.diff(grid) <= 0) or grid[0] <= 0 or grid[-1] >= 1:
        raise DomainError("check grid must be strictly increasing inside (0, 1)")
    om = np.asarray(mod(grid), dtype=float)
    eps = mod.epsilon
    f2 = om * grid ** (-1.0 + eps)
    f3 = om * grid ** (n - eps)
    slack2 = rel_tol * np.maximum.accumulate(f2[::-1])[::-1]
    slack3 = rel_tol * np.maximum.accumulate(f3)
    om2 = bool(np.all(np.diff(f2) <= slack2[1:] + 1e-300))
    om3 = bool(np.all(np.diff(f3) >= -slack3[1:] - 1e-300))
    delta_grid = dini_integral(mod, grid[0], 1.0)
    if mod.dini_tail is not None:
        tail = mod.dini_tail(grid[0])
    else:
        tail = om[0] ** 2 / (2.0 - 2.0 * eps)
    c_chk = ((1.0 - 2.0 ** (-(2 - 2 * eps))) / (2 - 2 * eps)) ** -0.5
    sup_omega = float(om.max())
    total = delta_grid + tail
    bound_ok = bool(sup_omega <= c_chk * math.sqrt(total) * (1 + rel_tol)) \
        if math.isfinite(total) else False
    return OmegaReport(dini_delta=delta_grid, dini_tail=tail,
                       om2_holds=om2, om3_holds=om3, sup_omega=sup_omega,
                       sqrt_delta_bound_ok=bound_ok, c_chk=c_chk,
                       delta_star=delta_star, epsilon=eps)


def default_check_grid(r_lo: float = 1e-6, n_points: int = 600) -> np.ndarray:
    return np.geomspace(r_lo, 1.0 - 1e-9, n_points)


def admissible_envelope(radial_sup: Callable[[np.ndarray], np.ndarray],
                        epsilon: float = 0.2,
                        n_dim: int = 3,
                        r_lo: float = 1e-8,
                        per_octave: int = 128,
                        dini_tail=None,
                        label: str = "envelope") -> ModulusOmega:
    """Least admissible majorant of a sampled radial bound.

    Given r -> sup_{|x| = r} |a(x) - I| (zero beyond 1), builds a modulus
    that dominates the forward annulus sup over (r, 2r) and satisfies both
    power-weighted monotone conditions: a sliding one-octave max, a
    curvature-based inflation covering the chord error of the geometric
    interpolation between table nodes, a prefix running max in the
    r^(n - epsilon) weight (moduli may not decay arbitrarily fast going
    outward), then a suffix running max in the r^(epsilon - 1) weight.
    The last step preserves the first monotone property.
    """
    m = int(per_octave * math.log2(1.0 / r_lo)) + 1
    r = np.geomspace(r_lo, 1.0, m)
    f = np.asarray(radial_sup(np.minimum(r, 1.0 - 1e-14)), dtype=float)
    # forward sup over one octave: F(r_i) = max f on [r_i, min(2 r_i, 1)]
    fwd = np.empty_like(f)
    for i in range(m):
        fwd[i] = f[i: min(m, i + per_octave + 1)].max()
    # chord undershoot of log-log interpolation <= max |(log f)''| h^2 / 8,
    # estimated by second differences of the table itself
    logs = np.log(np.maximum(fwd, 1e-300))
    d2 = np.abs(np.diff(logs, 2))
    pad = np.concatenate([[0.0], d2, [0.0]])
    infl = np.exp(np.minimum(np.maximum(pad, np.concatenate([pad[1:], [0.0]])) / 8.0,
                             0.7))
    fwd = fwd * infl
    g3 = fwd * r ** (n_dim - epsilon)
    g3 = np.maximum.accumulate(g3)
    fwd = g3 * r ** (epsilon - n_dim)
    g = fwd * r ** (epsilon - 1.0)
    g = np.maximum.accumulate(g[::-1])[::-1]
    env = g * r ** (1.0 - epsilon)

    def below(rr):
        return np.asarray(radial_sup(np.minimum(2 * rr, 1.0 - 1e-14)), dtype=float)

    tail = dini_tail
    if tail is None:
        tail = lambda rr: env[0] ** 2 / (2 - 2 * epsilon)  # noqa: E731
    return tabulated_modulus(r, env, epsilon, below=below, dini_tail=tail,
                             label=label)
