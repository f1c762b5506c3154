"""Product grids and annular L^p means.

The radial grid is geometric with nodes on the lattice r = 2^(k/m), so r = 1
is always a node and the annulus (r, 2r) between any node and its doubling is
an exact run of m intervals; no endpoint snapping error enters the means.

Radial integrals are computed as integrals of cubic splines in t = log r
against exact exponential weights e^(a t), which keeps fourth-order accuracy
uniformly in the weight exponent.  All radial data may jump at r = 1 (the
coefficients may be discontinuous across the unit sphere), so splines are
built separately on the two sides of that node; arrays carry an optional
second value for the right limit there.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

from .errors import DomainError
from .sphharm import SPHERE_AREA_3D, HarmonicBasis, get_basis

LN2 = math.log(2.0)


def _exp_moments(h: float, a: float) -> np.ndarray:
    """mu_k = integral_0^h e^(a tau) tau^k dtau for k = 0..3, by series."""
    mu = np.zeros(4)
    for k in range(4):
        term = h ** (k + 1) / (k + 1)
        total = term
        j = 1
        while j < 80:
            term *= a * h * (k + j) / (j * (k + j + 1))
            total += term
            if abs(term) <= 1e-18 * abs(total):
                break
            j += 1
        mu[k] = total
    return mu


def _segment_interval_integrals(t: np.ndarray, y: np.ndarray, a: float) -> np.ndarray:
    """Per-interval integrals of e^(a t) * spline(y)(t); y has axis 0 = t."""
    if len(t) < 2:
        return np.zeros((0,) + y.shape[1:], dtype=y.dtype)
    if len(t) == 2:
        # too short for a cubic: trapezoid against the exact weight
        mu = _exp_moments(t[1] - t[0], a)
        h = t[1] - t[0]
        w0 = mu[0] - mu[1] / h
        w1 = mu[1] / h
        return (math.e ** (a * t[0]) * (w0 * y[0] + w1 * y[1]))[None]
    spline = CubicSpline(t, y, axis=0)
    h = t[1] - t[0]
    mu = _exp_moments(h, a)
    # spline.c[m] multiplies (t - t_i)^(3-m)
    c = spline.c
    vals = sum(c[m] * mu[3 - m] for m in range(4))
    shape = (len(t) - 1,) + (1,) * (y.ndim - 1)
    return vals * np.exp(a * t[:-1]).reshape(shape)


@dataclass(frozen=True)
class RadialGrid:
    """Geometric radial grid on the lattice r = 2^(k/per_octave)."""

    per_octave: int
    k_min: int
    k_max: int
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    t: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.k_min >= 0 or self.k_max <= 0:
            raise DomainError("grid must include r = 1 strictly inside")
        k = np.arange(self.k_min, self.k_max + 1)
        t = k * (LN2 / self.per_octave)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "nodes", np.exp(t))

    @classmethod
    def geometric(cls, r_min: float, r_max: float, per_octave: int = 18) -> "RadialGrid":
        """Smallest lattice grid covering [r_min, r_max]."""
        if not (0 < r_min < 1 < r_max):
            raise DomainError("need 0 < r_min < 1 < r_max")
        k_min = math.floor(per_octave * math.log2(r_min) + 1e-9)
        k_max = math.ceil(per_octave * math.log2(r_max) - 1e-9)
        return cls(per_octave, k_min, k_max)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def h(self) -> float:
        return LN2 / self.per_octave

    @property
    def r_min(self) -> float:
        return float(self.nodes[0])

    @property
    def r_max(self) -> float:
        return float(self.nodes[-1])

    @property
    def break_index(self) -> int:
        """Index of the node r = 1, where radial data may jump."""
        return -self.k_min

    def index_of(self, r: float) -> int:
        """Nearest node index; r must lie within half a cell of the span."""
        if r <= 0:
            raise DomainError("radius must be positive")
        k = self.per_octave * math.log2(r)
        i = round(k) - self.k_min
        if i < -0.5 or i > len(self) - 0.5:
            raise DomainError(f"radius {r} outside grid span "
                              f"[{self.r_min}, {self.r_max}]")
        return int(min(max(i, 0), len(self) - 1))

    def sha256(self) -> str:
        return hashlib.sha256(self.nodes.tobytes()).hexdigest()

    def refined(self, times: int = 1) -> "RadialGrid":
        f = 2 ** times
        return RadialGrid(self.per_octave * f, self.k_min * f, self.k_max * f)

    # -- radial quadrature ---------------------------------------------------

    def _interval_integrals(self, y: np.ndarray, a: float,
                            right_at_break=None) -> np.ndarray:
        y = np.asarray(y)
        ib = self.break_index
        left = _segment_interval_integrals(self.t[: ib + 1], y[: ib + 1], a)
        y_right = y[ib:].copy()
        if right_at_break is not None:
            y_right[0] = right_at_break
        right = _segment_interval_integrals(self.t[ib:], y_right, a)
        return np.concatenate([left, right], axis=0)

    def cumulative(self, y: np.ndarray, a: float = 0.0,
                   right_at_break=None) -> np.ndarray:
        """Prefix integrals of e^(a t) y(t) dt from the first node.

        Weight e^(a t) = r^a is handled exactly; y is splined per segment.
        """
        ints = self._interval_integrals(y, a, right_at_break)
        out = np.zeros((len(self),) + ints.shape[1:], dtype=ints.dtype)
        np.cumsum(ints, axis=0, out=out[1:])
        return out

    def suffix(self, y: np.ndarray, a: float = 0.0,
               right_at_break=None) -> np.ndarray:
        """Integrals of e^(a t) y(t) dt from each node to the last one."""
        pre = self.cumulative(y, a, right_at_break)
        return pre[-1] - pre

    def integral(self, y: np.ndarray, a: float = 0.0,
                 right_at_break=None):
        return self.cumulative(y, a, right_at_break)[-1]


def _pchip_log(r_nodes, values, r):
    return PchipInterpolator(np.log(r_nodes), values)(math.log(r))


@dataclass(frozen=True)
class SphereRule:
    """Gauss-Legendre (polar) x uniform (azimuth) quadrature on S^2.

    Carries the harmonic basis evaluated at its own nodes, so forward and
    inverse transforms of band-limited fields are exact whenever the rule's
    polynomial exactness covers twice the band.
    """

    n_polar: int
    n_az: int
    l_max: int
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)
    basis: HarmonicBasis = field(init=False, repr=False, compare=False)
    Y: np.ndarray = field(init=False, repr=False, compare=False)
    proj: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        x, w = np.polynomial.legendre.leggauss(self.n_polar)
        phi = 2 * np.pi * (np.arange(self.n_az) + 0.5) / self.n_az
        st = np.sqrt(1.0 - x ** 2)
        pts = np.stack([
            np.outer(st, np.cos(phi)).ravel(),
            np.outer(st, np.sin(phi)).ravel(),
            np.repeat(x, self.n_az),
        ], axis=-1)
        wq = np.repeat(w, self.n_az) * (2 * np.pi / self.n_az)
        basis = get_basis(self.l_max)
        Y = basis.evaluate(pts)
        object.__setattr__(self, "nodes", pts)
        object.__setattr__(self, "weights", wq)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "proj", Y * wq)

    @classmethod
    def for_band(cls, l_max: int, n_polar: int | None = None,
                 n_az: int | None = None) -> "SphereRule":
        return cls(n_polar or l_max + 3, n_az or 2 * l_max + 6, l_max)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def exactness_degree(self) -> int:
        return min(2 * self.n_polar - 1, self.n_az - 1)

    def refined(self, times: int = 1) -> "SphereRule":
        f = 2 ** times
        return SphereRule.for_band(self.l_max * f)

    def transform(self, values: np.ndarray) -> np.ndarray:
        """Harmonic coefficients of per-node values (last axis = nodes)."""
        return values @ self.proj.T

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs @ self.Y

    def mean(self, values: np.ndarray) -> np.ndarray:
        """Area-normalized spherical mean along the node axis."""
        return values @ self.weights / SPHERE_AREA_3D

    def sha256(self) -> str:
        return hashlib.sha256(self.nodes.tobytes() + self.weights.tobytes()).hexdigest()


@dataclass
class RadialProfile:
    """Complex samples of a radial function on the grid nodes."""

    values: np.ndarray
    rgrid: RadialGrid
    right_at_break: complex | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (len(self.rgrid),):
            raise DomainError("profile shape does not match grid")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("profile contains non-finite values")

    def at(self, r: float):
        """Value at radius r; off-node queries use pchip in log r."""
        i = self.rgrid.index_of(r)
        if abs(self.rgrid.nodes[i] - r) <= 1e-12 * r:
            return self.values[i]
        ib = self.rgrid.break_index
        sl = slice(0, ib + 1) if r < 1.0 else slice(ib, None)
        vals = self.values[sl]
        if r >= 1.0 and self.right_at_break is not None:
            vals = vals.copy()
            vals[0] = self.right_at_break
        if np.iscomplexobj(vals):
            return (_pchip_log(self.rgrid.nodes[sl], vals.real, r)
                    + 1j * _pchip_log(self.rgrid.nodes[sl], vals.imag, r))
        return _pchip_log(self.rgrid.nodes[sl], vals, r)


@dataclass
class AnnularField:
    """Complex samples on the (radial node x sphere node) product grid."""

    values: np.ndarray
    rgrid: RadialGrid
    sphere: SphereRule
    right_at_break: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        expected = (len(self.rgrid), len(self.sphere))
        if self.values.shape != expected:
            raise DomainError(f"field shape {self.values.shape} != {expected}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("field contains non-finite values")

    @classmethod
    def from_function(cls, fn, rgrid: RadialGrid, sphere: SphereRule) -> "AnnularField":
        pts = rgrid.nodes[:, None, None] * sphere.nodes[None, :, :]
        vals = fn(pts.reshape(-1, 3)).reshape(len(rgrid), len(sphere))
        return cls(np.asarray(vals, dtype=complex), rgrid, sphere)

    @classmethod
    def zeros(cls, rgrid, sphere) -> "AnnularField":
        return cls(np.zeros((len(rgrid), len(sphere)), dtype=complex), rgrid, sphere)

    def copy_with(self, values, right_at_break=None) -> "AnnularField":
        return AnnularField(values, self.rgrid, self.sphere, right_at_break)

    def sphere_means(self) -> RadialProfile:
        rab = None
        if self.right_at_break is not None:
            rab = complex(self.sphere.mean(self.right_at_break))
        return RadialProfile(self.sphere.mean(self.values), self.rgrid, rab)

    def coefficients(self) -> np.ndarray:
        """Harmonic coefficients per shell, shape (n_r, (l_max+1)^2)."""
        return self.sphere.transform(self.values)

    def max_abs(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def max_mean_defect(self) -> float:
        """Largest spherical mean magnitude, for zero-mean contracts."""
        return float(np.abs(self.sphere.mean(self.values)).max())


# -- annular means ------------------------------------------------------------


def _mean_integrand(field: AnnularField, p: float):
    absp = np.abs(field.values) ** p
    s = absp @ field.sphere.weights
    s_right = None
    if field.right_at_break is not None:
        s_right = float(np.abs(field.right_at_break) ** p @ field.sphere.weights)
    return s, s_right


def p_mean_profile(field: AnnularField, p: float = 2.0, n: int = 3,
                   spread: tuple[float, float] = (1.0, 2.0)) -> np.ndarray:
    """L^p means over annuli (c0*r, c1*r) at every node where they fit.

    Returns an array aligned with the radial nodes; NaN where the annulus
    leaves the grid.  The default spread gives the dyadic annulus (r, 2r).
    """
    if p < 1:
        raise DomainError("p must be >= 1")
    g = field.rgrid
    c0, c1 = spread
    m0 = round(g.per_octave * math.log2(c0))
    m1 = round(g.per_octave * math.log2(c1))
    if not (math.isclose(2.0 ** (m0 / g.per_octave), c0, rel_tol=1e-12)
            and math.isclose(2.0 ** (m1 / g.per_octave), c1, rel_tol=1e-12)):
        raise DomainError("annulus bounds must sit on the grid lattice")
    s, s_right = _mean_integrand(field, p)
    prefix = g.cumulative(s, a=float(n), right_at_break=s_right)
    out = np.full(len(g), np.nan)
    volume_coeff = SPHERE_AREA_3D * (c1 ** n - c0 ** n) / n
    lo = max(0, -m0)
    hi = len(g) - max(0, m1)
    idx = np.arange(lo, hi)
    if len(idx):
        num = prefix[idx + m1] - prefix[idx + m0]
        vol = volume_coeff * g.nodes[idx] ** n
        out[idx] = np.maximum(num.real / vol, 0.0) ** (1.0 / p)
    return out


def p_mean(field: AnnularField, r: float, p: float = 2.0, n: int = 3) -> float:
    """L^p mean of |field| over the annulus (r, 2r); r snaps to a node."""
    i = field.rgrid.index_of(r)
    val = p_mean_profile(field, p, n)[i]
    if math.isnan(val):
        raise DomainError(f"annulus ({r}, {2 * r}) outside grid span")
    return float(val)


def tilde_p_mean(field: AnnularField, r: float, p: float = 2.0, n: int = 3) -> float:
    """L^p mean over the widened annulus (r/2, 4r)."""
    i = field.rgrid.index_of(r)
    val = p_mean_profile(field, p, n, spread=(0.5, 4.0))[i]
    if math.isnan(val):
        raise DomainError(f"annulus ({r / 2}, {4 * r}) outside grid span")
    return float(val)


def sphere_mean(field: AnnularField, r: float):
    """Area-normalized spherical mean at radius r (pchip off nodes)."""
    return field.sphere_means().at(r)


def x_norm(field: AnnularField, omega, delta: float, p: float = 2.0,
           n: int = 3, tiny: float = 1e-13) -> float:
    """Weighted sup norm: sup_{r<1} M_p/Omega + sup_{r>1} M_p/(sqrt(delta) r^-n).

    Nodes with Omega = 0 contribute 0 when the mean vanishes too and +inf
    otherwise; means whose annulus leaves the grid are skipped.
    """
    mp = p_mean_profile(field, p, n)
    r = field.rgrid.nodes
    scale = np.nanmax(mp) if np.isfinite(np.nanmax(mp)) else 0.0
    floor = tiny * max(scale, 1e-300)
    sup_in = 0.0
    inner = (r < 1.0) & ~np.isnan(mp)
    if inner.any():
        om = np.asarray(omega(r[inner]), dtype=float)
        vals = np.zeros(om.shape)
        ok = om > 0
        vals[ok] = mp[inner][ok] / om[ok]
        bad = (~ok) & (mp[inner] > floor)
        if bad.any():
            return math.inf
        sup_in = float(vals.max()) if len(vals) else 0.0
    sup_out = 0.0
    outer = (r > 1.0) & ~np.isnan(mp)
    if outer.any() and delta > 0:
        sup_out = float((mp[outer] / (math.sqrt(delta) * r[outer] ** (-n))).max())
    return sup_in + sup_out
