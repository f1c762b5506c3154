"""Real spherical harmonics as explicit polynomials in (x, y, z).

Each degree-l basis function is a harmonic homogeneous polynomial of degree l
(a solid harmonic), orthonormalized in L^2 of the unit sphere.  Keeping the
monomial coefficients around gives exact Cartesian derivatives, which the
singular-integral machinery needs: second derivatives of solid harmonics are
again solid harmonics and can be evaluated anywhere without finite
differencing.

The basis is built numerically: harmonic polynomials are the nullspace of the
Laplacian acting on homogeneous polynomials (an integer matrix), and the Gram
matrix over the sphere comes from the closed-form monomial moments.  No
recurrence formulas are trusted from memory; orthonormality and harmonicity
are asserted at build time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

SPHERE_AREA_3D = 4.0 * math.pi


def monomial_exponents(degree: int) -> np.ndarray:
    """All (a, b, c) with a + b + c == degree, in a fixed order."""
    exps = [(a, b, degree - a - b)
            for a in range(degree, -1, -1)
            for b in range(degree - a, -1, -1)]
    return np.array(exps, dtype=np.int64).reshape(-1, 3)


def sphere_monomial_moment(a: int, b: int, c: int) -> float:
    """Integral of x^a y^b z^c over the unit sphere in R^3.

    Zero unless all exponents are even; otherwise
    2 * Gamma((a+1)/2) Gamma((b+1)/2) Gamma((c+1)/2) / Gamma((a+b+c+3)/2).
    """
    if a % 2 or b % 2 or c % 2:
        return 0.0
    num = (math.gamma((a + 1) / 2) * math.gamma((b + 1) / 2)
           * math.gamma((c + 1) / 2))
    return 2.0 * num / math.gamma((a + b + c + 3) / 2)


def eval_monomials(exps: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Evaluate monomial basis at points, shape (n_mono, n_pts)."""
    pts = np.atleast_2d(pts)
    deg = int(exps.max()) if len(exps) else 0
    # cumulative power tables per axis: pow[k] = coordinate^k
    pows = np.ones((3, deg + 1, len(pts)))
    for axis in range(3):
        for k in range(1, deg + 1):
            pows[axis, k] = pows[axis, k - 1] * pts[:, axis]
    return pows[0, exps[:, 0]] * pows[1, exps[:, 1]] * pows[2, exps[:, 2]]


def _derivative_map(exps_hi: np.ndarray, exps_lo: np.ndarray, axis: int) -> np.ndarray:
    """Matrix taking degree-d monomial coefficients to d/dx_axis coefficients."""
    index_lo = {tuple(e): i for i, e in enumerate(exps_lo)}
    mat = np.zeros((len(exps_lo), len(exps_hi)))
    for j, e in enumerate(exps_hi):
        if e[axis] == 0:
            continue
        tgt = e.copy()
        tgt[axis] -= 1
        mat[index_lo[tuple(tgt)], j] = e[axis]
    return mat


@lru_cache(maxsize=None)
def _degree_tables(degree: int):
    exps = monomial_exponents(degree)
    if degree >= 1:
        exps_lo = monomial_exponents(degree - 1)
        deriv = [_derivative_map(exps, exps_lo, ax) for ax in range(3)]
    else:
        deriv = [np.zeros((0, 1))] * 3
    return exps, deriv


@lru_cache(maxsize=None)
def harmonic_coefficients(l: int) -> np.ndarray:
    """Orthonormal real harmonics of degree l as monomial coefficient rows.

    Returns shape (2l+1, n_monomials(l)); the polynomials restrict to an
    orthonormal set in L^2(S^2).
    """
    exps, deriv = _degree_tables(l)
    n = len(exps)
    if l == 0:
        return np.array([[1.0 / math.sqrt(SPHERE_AREA_3D)]])
    if l == 1:
        null = np.eye(n)  # every linear polynomial is harmonic
    else:
        _, deriv_d1 = _degree_tables(l - 1)
        lap = sum(deriv_d1[ax] @ deriv[ax] for ax in range(3))
        u, s, vt = np.linalg.svd(lap)
        tol = max(lap.shape) * np.finfo(float).eps * (s[0] if len(s) else 1.0)
        rank = int((s > tol).sum())
        null = vt[rank:]
    if len(null) != 2 * l + 1:
        raise RuntimeError(f"harmonic space at degree {l} has wrong dimension "
                           f"{len(null)} != {2 * l + 1}")
    # Gram matrix over the sphere from analytic monomial moments
    moments = np.array([[sphere_monomial_moment(*(ei + ej)) for ej in exps]
                        for ei in exps])
    gram = null @ moments @ null.T
    chol = np.linalg.cholesky(gram)
    basis = np.linalg.solve(chol, null)
    # build-time self check: orthonormal and harmonic
    check = basis @ moments @ basis.T
    if not np.allclose(check, np.eye(2 * l + 1), atol=1e-9):
        raise RuntimeError(f"orthonormalization failed at degree {l}")
    return basis


@dataclass(frozen=True)
class HarmonicBasis:
    """Real orthonormal spherical-harmonic basis for degrees 0..l_max.

    Index layout is lexicographic in (l, k) with k = 0..2l; degree l starts
    at offset l*l and the total size is (l_max+1)^2.
    """

    l_max: int
    _coeffs: tuple = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_coeffs",
                           tuple(harmonic_coefficients(l)
                                 for l in range(self.l_max + 1)))

    @property
    def size(self) -> int:
        return (self.l_max + 1) ** 2

    def degrees(self) -> np.ndarray:
        """Degree l of each basis index."""
        return np.repeat(np.arange(self.l_max + 1),
                         2 * np.arange(self.l_max + 1) + 1)

    def coefficients(self, l: int) -> np.ndarray:
        return self._coeffs[l]

    def evaluate(self, pts: np.ndarray) -> np.ndarray:
        """Basis values at unit vectors, shape (size, n_pts)."""
        pts = np.atleast_2d(pts)
        deg = self.l_max
        pows = np.ones((3, deg + 1, len(pts)))
        for axis in range(3):
            for k in range(1, deg + 1):
                pows[axis, k] = pows[axis, k - 1] * pts[:, axis]
        blocks = []
        for l in range(self.l_max + 1):
            exps, _ = _degree_tables(l)
            mono = pows[0, exps[:, 0]] * pows[1, exps[:, 1]] * pows[2, exps[:, 2]]
            blocks.append(self._coeffs[l] @ mono)
        return np.concatenate(blocks, axis=0)

    def first_derivatives(self, l: int) -> list[np.ndarray]:
        """Monomial coefficients of d/dx_i of each degree-l harmonic."""
        _, deriv = _degree_tables(l)
        return [self._coeffs[l] @ deriv[ax].T for ax in range(3)]

    def second_derivatives(self, l: int) -> list[list[np.ndarray]]:
        """Coefficients of d2/dx_i dx_j per degree-l harmonic (degree l-2)."""
        if l < 2:
            z = np.zeros((2 * l + 1, 1))
            return [[z] * 3 for _ in range(3)]
        _, deriv_hi = _degree_tables(l)
        _, deriv_lo = _degree_tables(l - 1)
        out = []
        for i in range(3):
            row = []
            for j in range(3):
                row.append(self._coeffs[l] @ deriv_hi[j].T @ deriv_lo[i].T)
            out.append(row)
        return out


@lru_cache(maxsize=8)
def get_basis(l_max: int) -> HarmonicBasis:
    return HarmonicBasis(l_max)
