"""Coefficient fields a(x): complex symmetric matrices, identity outside B_1.

Built-in families:

* equivariant fields  a = beta(r) I + gamma(r) theta theta^T, the analytically
  solvable class used as the solver oracle;
* a trace-preserving equivariant family with a sharp jump at r = 1 (its
  radial factor keeps its closed form all the way to the boundary);
* angular perturbations  base + m(r) P(theta) with a symmetric pattern P,
  which drive genuinely three-dimensional fluctuations;
* tabulated fields ingested from CSV with nearest-sample evaluation.

Each field carries a stabilization modulus dominating sup |a - I| per annulus.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError
from .grids import RadialGrid, SphereRule
from .modulus import ModulusOmega, admissible_envelope, zero_modulus
from .sphharm import SPHERE_AREA_3D


def smooth_step(x):
    """C^infinity monotone step: 0 for x <= 0, 1 for x >= 1."""
    x = np.asarray(x, dtype=float)
    lo = x <= 0
    hi = x >= 1
    mid = ~lo & ~hi
    out = np.zeros_like(x)
    out[hi] = 1.0
    if mid.any():
        xm = x[mid]
        f = np.exp(-1.0 / xm)
        g = np.exp(-1.0 / (1.0 - xm))
        out[mid] = f / (f + g)
    return out


def smooth_cutoff(r, r_cut: float = 0.5):
    """1 for r <= r_cut, 0 for r >= 1, smooth and monotone in between."""
    return smooth_step((1.0 - np.asarray(r, dtype=float)) / (1.0 - r_cut))


def spectral_norms(mats: np.ndarray) -> np.ndarray:
    """Largest singular value of each matrix in a (..., n, n) stack."""
    return np.linalg.svd(mats, compute_uv=False)[..., 0]


@dataclass
class CoefficientField:
    """Matrix coefficient map with its stabilization envelope.

    ``entry_map`` returns value I exactly for |x| >= 1.  ``inner_map``, when
    present, extends the formula used strictly inside B_1 up to the closed
    boundary; samplers use it for left limits at r = 1 when the family jumps
    there.
    """

    dim: int
    entry_map: Callable[[np.ndarray], np.ndarray]
    envelope: ModulusOmega
    label: str = "custom"
    params: dict = field(default_factory=dict)
    inner_map: Callable[[np.ndarray], np.ndarray] | None = None
    radial_parts: tuple[Callable, Callable] | None = None  # (beta, gamma) inside B_1

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return self.entry_map(np.atleast_2d(np.asarray(pts, dtype=float)))

    @property
    def is_equivariant(self) -> bool:
        return self.radial_parts is not None

    def sample(self, rgrid: RadialGrid, sphere: SphereRule):
        """Values on the product grid, left-closed at the r = 1 shell.

        Floating-point radii of the break shell straddle 1, so the row is
        overwritten with the inner limit whenever the family jumps there;
        the outer limit on that shell is the identity by construction.
        """
        pts = (rgrid.nodes[:, None, None] * sphere.nodes[None, :, :]).reshape(-1, 3)
        vals = self(pts).reshape(len(rgrid), len(sphere), self.dim, self.dim)
        inner_at_break = None
        if self.inner_map is not None:
            inner = np.asarray(self.inner_map(sphere.nodes), dtype=complex)
            if not np.allclose(inner, np.eye(self.dim), atol=1e-13):
                vals[rgrid.break_index] = inner
                inner_at_break = inner
        return vals, inner_at_break


def _check_symmetry(sample: np.ndarray, what: str):
    if not np.array_equal(sample, np.swapaxes(sample, -1, -2)):
        raise DomainError(f"{what} must be symmetric")


def _validate_envelope(fld: CoefficientField, tol: float = 1e-9):
    radii = np.geomspace(1e-6, 0.999, 120)
    rng = np.random.default_rng(7)
    dirs = rng.normal(size=(48, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, 3)
    dev = spectral_norms(fld(pts) - np.eye(fld.dim)).reshape(len(radii), -1).max(axis=1)
    # forward annulus sup is what the envelope promises
    om = np.asarray(fld.envelope(radii), dtype=float)
    for i, r in enumerate(radii):
        window = dev[(radii >= r) & (radii <= 2 * r)]
        if window.size and window.max() > om[i] + tol + 1e-12:
            raise DomainError(
                f"envelope violated near r = {r:.3e}: sup |a-I| = "
                f"{window.max():.3e} > Omega = {om[i]:.3e}")


def equivariant_field(beta: Callable, gamma: Callable, n: int = 3,
                      envelope: ModulusOmega | None = None,
                      label: str = "equivariant", params: dict | None = None,
                      jump_at_one: bool = False,
                      ellipticity_margin: float = 0.05,
                      validate: bool = True) -> CoefficientField:
    """a(x) = beta(|x|) I + gamma(|x|) theta theta^T, identity outside B_1.

    ``beta`` and ``gamma`` are the inside-B_1 radial laws; they must satisfy
    beta -> 1, gamma -> 0 as r -> 1 unless ``jump_at_one`` is set.
    """
    eye = np.eye(n)

    def inner_mats(pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=-1)
        r = np.maximum(r, 1e-300)
        theta = pts / r[..., None]
        b = np.asarray(beta(r), dtype=complex)
        g = np.asarray(gamma(r), dtype=complex)
        return (b[..., None, None] * eye
                + g[..., None, None] * theta[..., :, None] * theta[..., None, :])

    def entry(pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=-1)
        out = np.broadcast_to(eye, pts.shape[:-1] + (n, n)).astype(complex).copy()
        ins = r < 1.0
        if ins.any():
            out[ins] = inner_mats(pts[ins])
        return out

    rr = np.geomspace(1e-8, 1.0, 400)
    bmin = np.abs(np.asarray(beta(rr), dtype=complex)).min()
    if bmin < ellipticity_margin:
        raise DomainError(f"|beta| reaches {bmin:.3e}, below the "
                          f"ellipticity margin {ellipticity_margin}")
    if envelope is None:
        def sup_dev(r):
            b = np.asarray(beta(r), dtype=complex)
            g = np.asarray(gamma(r), dtype=complex)
            # eigenvalues of a - I are beta-1 (x (n-1)) and beta+gamma-1
            return np.maximum(np.abs(b - 1.0), np.abs(b + g - 1.0))
        envelope = admissible_envelope(sup_dev, n_dim=n, label=f"{label}-envelope")
    fld = CoefficientField(
        dim=n, entry_map=entry, envelope=envelope, label=label,
        params=params or {},
        inner_map=(lambda dirs: inner_mats(dirs)) if jump_at_one else None,
        radial_parts=(beta, gamma))
    if validate:
        _validate_envelope(fld)
    return fld


def identity_field(n: int = 3) -> CoefficientField:
    return equivariant_field(lambda r: np.ones_like(r), lambda r: np.zeros_like(r),
                             n=n, envelope=zero_modulus(), label="identity",
                             validate=False)


def g_field(kappa: float = 0.1, s: float = 0.75, n: int = 3,
            r_cut: float = 0.5) -> CoefficientField:
    """Conformal family a = g(r) I with g = 1 + kappa (log e/r)^-s * cutoff.

    Exact solution of the double divergence equation: Z = const / g, since
    g Z is then radial and harmonic away from the origin.
    """
    def g(r):
        return 1.0 + kappa * np.log(np.e / np.asarray(r, dtype=float)) ** (-s) \
            * smooth_cutoff(r, r_cut)

    return equivariant_field(g, lambda r: np.zeros_like(np.asarray(r, dtype=float)),
                             n=n, label="g", params={"kappa": kappa, "s": s,
                                                     "r_cut": r_cut})


def k_field(kappa: float = 0.1, s: float = 0.75, n: int = 3) -> CoefficientField:
    """Trace-preserving family a = I + k(r)(I - n theta theta^T) inside B_1.

    k keeps its closed form k(r) = kappa (log e/r)^-s on all of (0, 1], so a
    jumps to the identity across |x| = 1; the trace of a equals n everywhere
    and |a - I| = (n-1)|k|.  The attached envelope is the least admissible
    majorant of the forward annulus sup, with its closed-form Dini tail.
    """
    kabs = abs(kappa)

    def k(r):
        return kappa * np.log(np.e / np.asarray(r, dtype=float)) ** (-s)

    def sup_dev(r):
        return (n - 1) * kabs * np.log(np.e / np.asarray(r, dtype=float)) ** (-s)

    def tail(r_lo: float) -> float:
        if s <= 0.5:
            return math.inf
        u = math.log(math.e / min(2 * r_lo, 1.0))
        return ((n - 1) * kabs) ** 2 * u ** (1 - 2 * s) / (2 * s - 1)

    env = admissible_envelope(sup_dev, n_dim=n, dini_tail=tail, label="k-envelope")
    return equivariant_field(lambda r: 1.0 + k(r), lambda r: -n * k(r), n=n,
                             envelope=env, label="k",
                             params={"kappa": kappa, "s": s},
                             jump_at_one=True)


def default_angular_pattern(dirs: np.ndarray) -> np.ndarray:
    """Symmetric traceless pattern with entries (1,2),(2,1) = theta_1 theta_2."""
    dirs = np.atleast_2d(dirs)
    out = np.zeros(dirs.shape[:-1] + (3, 3), dtype=complex)
    t1t2 = dirs[..., 0] * dirs[..., 1]
    out[..., 0, 1] = t1t2
    out[..., 1, 0] = t1t2
    return out


def angular_field(amplitude: complex = 0.05, s: float = 0.75, n: int = 3,
                  r_cut: float = 0.5, base: CoefficientField | None = None,
                  pattern: Callable[[np.ndarray], np.ndarray] | None = None,
                  label: str = "angular") -> CoefficientField:
    """base + m(r) P(theta) with m = amplitude (log e/r)^-s * cutoff.

    The pattern must be symmetric with spectral norm at most 1; the envelope
    adds sup|m| * sup|P| on top of the base envelope.
    """
    if n != 3:
        raise DomainError("angular fields are implemented for dimension 3")
    if base is None:
        base = identity_field(n)
    pat = pattern or default_angular_pattern
    probe = pat(np.array([[0.3, 0.5, np.sqrt(1 - 0.09 - 0.25)]]))
    _check_symmetry(probe, "angular pattern")
    rng = np.random.default_rng(11)
    dirs = rng.normal(size=(256, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pat_norm = float(spectral_norms(pat(dirs)).max())
    if pat_norm > 1.0 + 1e-12:
        raise DomainError(f"pattern spectral norm {pat_norm:.3f} exceeds 1")

    def m(r):
        return amplitude * np.log(np.e / np.asarray(r, dtype=float)) ** (-s) \
            * smooth_cutoff(r, r_cut)

    def entry(pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=-1)
        out = np.asarray(base(pts), dtype=complex).copy()
        ins = r < 1.0
        if ins.any():
            theta = pts[ins] / r[ins][..., None]
            out[ins] += m(r[ins])[..., None, None] * pat(theta)
        return out

    def sup_dev(r):
        r = np.asarray(r, dtype=float)
        return np.asarray(base.envelope(r), dtype=float) + np.abs(m(r)) * pat_norm

    env = admissible_envelope(sup_dev, n_dim=n, label=f"{label}-envelope")
    fld = CoefficientField(dim=n, entry_map=entry, envelope=env, label=label,
                           params={"amplitude": amplitude, "s": s,
                                   "r_cut": r_cut, "base": base.label})
    _validate_envelope(fld)
    return fld


def csv_field(path, n: int = 3, envelope: ModulusOmega | None = None) -> CoefficientField:
    """Tabulated coefficients with nearest-sample evaluation.

    CSV columns: x_1..x_n then Re a_ij, Im a_ij for the row-major upper
    triangle.  Outside B_1 the field is the identity regardless of the table.
    """
    from scipy.spatial import cKDTree

    n_upper = n * (n + 1) // 2
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            rows.append([float(v) for v in row])
    data = np.asarray(rows, dtype=float)
    if data.shape[1] != n + 2 * n_upper:
        raise DomainError(f"expected {n + 2 * n_upper} columns, got {data.shape[1]}")
    pts = data[:, :n]
    upper = data[:, n:n + n_upper] + 1j * data[:, n + n_upper:]
    mats = np.zeros((len(data), n, n), dtype=complex)
    iu = np.triu_indices(n)
    mats[:, iu[0], iu[1]] = upper
    mats[:, iu[1], iu[0]] = upper
    tree = cKDTree(pts)
    eye = np.eye(n)

    def entry(q):
        q = np.atleast_2d(q)
        r = np.linalg.norm(q, axis=-1)
        out = np.broadcast_to(eye, q.shape[:-1] + (n, n)).astype(complex).copy()
        ins = r < 1.0
        if ins.any():
            _, idx = tree.query(q[ins])
            out[ins] = mats[idx]
        return out

    if envelope is None:
        dev = spectral_norms(mats - eye)
        rr = np.maximum(np.linalg.norm(pts, axis=1), 1e-6)
        order = np.argsort(rr)
        envelope = admissible_envelope(
            lambda r: np.interp(np.asarray(r, dtype=float), rr[order], dev[order]),
            label="csv-envelope")
    return CoefficientField(dim=n, entry_map=entry, envelope=envelope,
                            label="csv", params={"path": str(path)})


def envelope_check(fld: CoefficientField, radii: np.ndarray | None = None,
                   n_dirs: int = 64, n_sub: int = 9, seed: int = 0,
                   tol: float = 1e-9) -> dict:
    """Sampled verification of the annulus bound sup |a - I| <= Omega(r).

    Reports per-radius sampled sup, envelope value and margin; failures are
    reported, not raised.
    """
    if radii is None:
        radii = np.geomspace(1e-4, 0.999, 25)
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_dirs, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rows = []
    for r in radii:
        rsub = np.geomspace(r, min(2 * r, 1.0) - 1e-12, n_sub)
        pts = (rsub[:, None, None] * dirs[None, :, :]).reshape(-1, 3)
        sup = float(spectral_norms(fld(pts) - np.eye(fld.dim)).max())
        om = float(fld.envelope(r))
        rows.append({"r": float(r), "sup": sup, "omega": om,
                     "margin": om - sup})
    ok = all(row["margin"] >= -tol for row in rows)
    return {"rows": rows, "pass": ok}


def stabilization_mean(fld: CoefficientField, r: float, sphere: SphereRule) -> complex:
    """Spherical mean of a_ii(r theta) - n a_ij(r theta) theta_i theta_j."""
    if r <= 0:
        raise DomainError("radius must be positive")
    pts = r * sphere.nodes
    a = fld(pts)
    tr = np.trace(a, axis1=-2, axis2=-1)
    quad = np.einsum("si,sij,sj->s", sphere.nodes, a, sphere.nodes)
    return complex((tr - fld.dim * quad) @ sphere.weights / SPHERE_AREA_3D)
