import math

import numpy as np
from numpy.polynomial import legendre

from ddform.sphharm import (
    HarmonicBasis,
    eval_monomials,
    get_basis,
    monomial_exponents,
    sphere_monomial_moment,
)


def random_unit_vectors(n, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_monomial_moment_against_quadrature():
    # oracle: dense polar x azimuth product quadrature
    n_t, n_p = 80, 160
    x, w = np.polynomial.legendre.leggauss(n_t)
    phi = 2 * np.pi * np.arange(n_p) / n_p
    st = np.sqrt(1 - x**2)
    pts = np.stack([np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)),
                    np.broadcast_to(x[:, None], (n_t, n_p))], axis=-1)
    wq = np.broadcast_to(w[:, None], (n_t, n_p)) * (2 * np.pi / n_p)
    for a, b, c in [(0, 0, 0), (2, 0, 0), (2, 2, 2), (4, 0, 2), (1, 0, 0), (3, 1, 2)]:
        quad = float((wq * pts[..., 0]**a * pts[..., 1]**b * pts[..., 2]**c).sum())
        assert abs(quad - sphere_monomial_moment(a, b, c)) < 1e-12


def test_basis_dimensions_and_orthonormality():
    basis = get_basis(8)
    assert basis.size == 81
    pts = random_unit_vectors(4, seed=0)
    vals = basis.evaluate(pts)
    assert vals.shape == (81, 4)
    # orthonormality via an exactness-matched quadrature
    from ddform.grids import SphereRule
    rule = SphereRule.for_band(8)
    Y = basis.evaluate(rule.nodes)
    gram = (Y * rule.weights) @ Y.T
    assert np.max(np.abs(gram - np.eye(81))) < 1e-10


def test_harmonicity_of_second_derivative_trace():
    basis = get_basis(10)
    pts = random_unit_vectors(50, seed=1)
    for l in [2, 5, 10]:
        d2 = basis.second_derivatives(l)
        exps = monomial_exponents(l - 2)
        mono = eval_monomials(exps, pts)
        trace = sum(d2[i][i] for i in range(3)) @ mono
        scale = np.abs(basis.coefficients(l)).max()
        assert np.max(np.abs(trace)) < 1e-10 * scale


def test_addition_theorem():
    # sum_k Y_lk(u) Y_lk(v) = (2l+1)/(4pi) P_l(u.v) for any orthonormal basis
    basis = get_basis(6)
    u = random_unit_vectors(20, seed=2)
    v = random_unit_vectors(20, seed=3)
    Yu = basis.evaluate(u)
    Yv = basis.evaluate(v)
    degs = basis.degrees()
    for l in range(7):
        sel = degs == l
        lhs = (Yu[sel] * Yv[sel]).sum(axis=0)
        coeff = np.zeros(l + 1)
        coeff[l] = 1.0
        rhs = (2 * l + 1) / (4 * math.pi) * legendre.legval((u * v).sum(axis=1), coeff)
        assert np.max(np.abs(lhs - rhs)) < 1e-11


def test_euler_identities_on_unit_sphere():
    # theta_i theta_j d_i d_j S = l(l-1) S and theta . grad S = l S for
    # homogeneous S of degree l, evaluated at |theta| = 1
    basis = get_basis(9)
    pts = random_unit_vectors(40, seed=4)
    for l in [1, 3, 6, 9]:
        S = basis.coefficients(l) @ eval_monomials(monomial_exponents(l), pts)
        d1 = basis.first_derivatives(l)
        mono1 = eval_monomials(monomial_exponents(l - 1), pts)
        radial = sum((d1[i] @ mono1) * pts[None, :, i] for i in range(3))
        assert np.max(np.abs(radial - l * S)) < 1e-10 * max(1.0, np.abs(S).max())
        if l >= 2:
            d2 = basis.second_derivatives(l)
            mono2 = eval_monomials(monomial_exponents(l - 2), pts)
            quad = sum((d2[i][j] @ mono2) * pts[None, :, i] * pts[None, :, j]
                       for i in range(3) for j in range(3))
            assert np.max(np.abs(quad - l * (l - 1) * S)) < 1e-9 * max(1.0, np.abs(S).max())
